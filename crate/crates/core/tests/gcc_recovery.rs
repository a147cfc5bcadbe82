mod common;

use common::checks::{gcc_exact_recoveries, speech_pair, GCC_FRAME, GCC_MAX_LAG};
use common::{delayed_noise_pair, rng};
use fsgcc_core::dsp::Spectrum;
use fsgcc_core::fsgcc::{band_average_tdoa, fs_gcc, FsGccConfig};
use fsgcc_core::gcc::{estimate_tdoa_gcc, gcc_phat};
use rand::Rng;

#[test]
fn gcc_phat_recovers_integer_delays() {
    let exact = gcc_exact_recoveries(100);
    assert!(exact >= 99, "exact in {exact}/100");
}

#[test]
fn white_noise_delays_recovered_by_every_estimator() {
    let cfg = FsGccConfig::default();
    for trial in 0..20u64 {
        let delay = rng(500 + trial).gen_range(-30..=30);
        let (x1, x2) = delayed_noise_pair(GCC_FRAME, delay, 30.0, trial);
        assert_eq!(estimate_tdoa_gcc(&gcc_phat(&x1, &x2).unwrap(), GCC_MAX_LAG).unwrap(), delay);
        let m = fs_gcc(&Spectrum::from_real(&x1).unwrap(), &Spectrum::from_real(&x2).unwrap(), &cfg).unwrap();
        assert_eq!(band_average_tdoa(&m.magnitude(), GCC_MAX_LAG).unwrap(), delay);
    }
}

#[test]
fn swapping_channels_negates_the_estimate() {
    for trial in 0..10u64 {
        let delay = rng(900 + trial).gen_range(-25..=25);
        let (x1, x2) = speech_pair(delay, 30.0, 900 + trial);
        let a = estimate_tdoa_gcc(&gcc_phat(&x1, &x2).unwrap(), GCC_MAX_LAG).unwrap();
        let b = estimate_tdoa_gcc(&gcc_phat(&x2, &x1).unwrap(), GCC_MAX_LAG).unwrap();
        assert_eq!(a, -b);
    }
}
