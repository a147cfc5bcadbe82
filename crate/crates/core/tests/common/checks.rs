//! Seeded measurement suites shared by the core tests and the acceptance run.
//! Each returns the measured quantity; callers own the tolerance.

use fsgcc_core::dataset::synth_speech_like;
use fsgcc_core::dsp::{fft, Spectrum, WindowKind};
use fsgcc_core::fsgcc::{fs_gcc, spectral_window, FsGccConfig, FsGccMatrix};
use fsgcc_core::gcc::{estimate_tdoa_gcc, gcc_phat};
use fsgcc_core::lowrank::{svd, svd_fsgcc, SvdFactorization};
use fsgcc_core::unet::{conv2d_forward, mse_loss, Conv2d, Mode, Tensor, UNetArchitecture, UNetModel};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Worst |FFT − DFT| over `cases` random lengths 1..=1024, both directions.
pub fn fft_vs_dft(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = rng(seed);
        let n = 1usize << r.gen_range(0..=10);
        let x = random_complex(&mut r, n);
        for inverse in [false, true] {
            worst = worst.max(max_abs_diff(&fft(&x, inverse).unwrap(), &naive_dft(&x, inverse)));
        }
    }
    worst
}

fn random_fsgcc_config(r: &mut ChaCha8Rng) -> FsGccConfig {
    let n = 1usize << r.gen_range(5..=8);
    let hop = r.gen_range(1..=n / 8);
    let max_bands = n / 2 / hop + 1;
    FsGccConfig {
        dft_length: n,
        window_support: r.gen_range(1..=n / 2),
        hop,
        band_count: r.gen_range(1..=max_bands.min(12)),
        window_shape: if r.gen_bool(0.5) { WindowKind::Hann } else { WindowKind::Rectangular },
    }
}

/// Worst entry error of FS-GCC rows against direct summation.
pub fn fsgcc_vs_direct(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = rng(1000 + seed);
        let cfg = random_fsgcc_config(&mut r);
        let n = cfg.dft_length;
        let x1: Vec<f64> = (0..n).map(|_| gaussian(&mut r)).collect();
        let x2: Vec<f64> = (0..n).map(|_| gaussian(&mut r)).collect();
        let m = fs_gcc(&Spectrum::from_real(&x1).unwrap(), &Spectrum::from_real(&x2).unwrap(), &cfg).unwrap();
        let psi = naive_phat(&x1, &x2);
        let phi = spectral_window(&cfg).unwrap();
        for l in 0..cfg.band_count {
            worst = worst.max(max_abs_diff(m.row(l), &direct_fsgcc_row(&psi, &phi, cfg.hop, l)));
        }
    }
    worst
}

/// Worst output error of `conv2d_forward` against explicit loops over
/// random shapes, kernels (even and odd) and strides 1–2.
pub fn conv2d_vs_naive(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = rng(2000 + seed);
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=12), r.gen_range(1..=12)];
        let cout = r.gen_range(1..=4);
        let kernel = (r.gen_range(1..=6), r.gen_range(1..=6));
        let stride = (r.gen_range(1..=2), r.gen_range(1..=2));
        let mut conv = Conv2d::he_uniform(shape[1], cout, kernel, stride, &mut r);
        conv.bias.iter_mut().for_each(|b| *b = gaussian(&mut r));
        let x: Vec<f64> = (0..shape.iter().product()).map(|_| gaussian(&mut r)).collect();
        let y = conv2d_forward(&Tensor::new(shape, x.clone()).unwrap(), &conv).unwrap();
        let (expected, eshape) = naive_conv2d(&x, shape, &conv.weight, &conv.bias, cout, kernel, stride);
        assert_eq!(y.shape(), eshape, "seed {seed}: output shape");
        let err = y.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    worst
}

pub const GCC_FRAME: usize = 2048;
pub const GCC_MAX_LAG: usize = 40;

/// Speech-like pair, channel 1 lagging by `delay`, white noise at `snr_db`,
/// Hann-windowed like the analysis frames. Without the taper the frame
/// edges leak a zero-lag component that outweighs the weak high bands.
pub fn speech_pair(delay: i64, snr_db: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let src = synth_speech_like(0.1, 44_100.0, seed).unwrap().into_samples();
    let start = 1000i64;
    let mut r = rng(seed ^ 0xabcdef);
    let window = WindowKind::Hann.samples(GCC_FRAME).unwrap();
    let mut channel = |shift: i64| -> Vec<f64> {
        let x: Vec<f64> = (0..GCC_FRAME).map(|i| src[(start + i as i64 - shift) as usize]).collect();
        let p = x.iter().map(|v| v * v).sum::<f64>() / GCC_FRAME as f64;
        let sd = (p / 10f64.powf(snr_db / 10.0)).sqrt();
        x.iter().zip(&window).map(|(v, w)| (v + sd * gaussian(&mut r)) * w).collect()
    };
    (channel(delay), channel(0))
}

/// Trials (of `trials`) where GCC-PHAT recovers a random integer delay
/// exactly; anechoic, 30 dB SNR.
pub fn gcc_exact_recoveries(trials: u64) -> usize {
    (0..trials)
        .filter(|&trial| {
            let delay = rng(trial).gen_range(-(GCC_MAX_LAG as i64)..=GCC_MAX_LAG as i64);
            let (x1, x2) = speech_pair(delay, 30.0, trial);
            estimate_tdoa_gcc(&gcc_phat(&x1, &x2).unwrap(), GCC_MAX_LAG).unwrap() == delay
        })
        .count()
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn orthonormality_error(vectors: &[Vec<Complex64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..vectors.len() {
        for j in 0..vectors.len() {
            let expected = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((inner(&vectors[i], &vectors[j]) - expected).norm());
        }
    }
    worst
}

pub fn reconstruction_error(a: &[Complex64], f: &SvdFactorization) -> f64 {
    let rec = f.reconstruct(f.rank());
    let diff: Vec<Complex64> = a.iter().zip(&rec).map(|(x, y)| x - y).collect();
    frobenius(&diff) / frobenius(a)
}

/// FS-GCC (default configuration) of a delayed white-noise pair at 5 dB.
pub fn noisy_fsgcc(seed: u64) -> FsGccMatrix {
    let (x1, x2) = delayed_noise_pair(2048, (seed % 21) as i64 - 10, 5.0, seed);
    fs_gcc(
        &Spectrum::from_real(&x1).unwrap(),
        &Spectrum::from_real(&x2).unwrap(),
        &FsGccConfig::default(),
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct SvdReport {
    pub cases: usize,
    pub orthonormality: f64,
    pub reconstruction: f64,
    /// `|‖A − A₁‖_F − √Σ_{i≥2} σᵢ²| / ‖A‖_F`
    pub optimum_mismatch: f64,
    pub competitors: usize,
    /// Competitors closer to `A` than the truncated SVD (beyond 1e-9 ‖A‖_F).
    pub beaten_by: usize,
}

/// Orthonormality and reconstruction over random and FS-GCC matrices, and
/// the rank-one optimum against `competitors` random rank-one matrices,
/// half unrelated and half small perturbations of the optimum, each scaled
/// optimally so only its shape competes.
pub fn svd_report(competitors: usize) -> SvdReport {
    let mut orth = 0.0f64;
    let mut rec = 0.0f64;
    let mut cases = 0;
    let mut check = |a: &[Complex64], f: &SvdFactorization| {
        orth = orth.max(orthonormality_error(&f.u)).max(orthonormality_error(&f.v));
        rec = rec.max(reconstruction_error(a, f));
        assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]) && f.singular_values.iter().all(|s| *s >= 0.0));
        cases += 1;
    };
    for seed in 0..20u64 {
        let mut r = rng(3000 + seed);
        let (rows, cols) = (r.gen_range(1..=12), r.gen_range(1..=40));
        let a = random_complex(&mut r, rows * cols);
        check(&a, &svd(&a, rows, cols));
    }
    for seed in 0..4u64 {
        let m = noisy_fsgcc(seed);
        check(m.entries(), &svd_fsgcc(&m));
    }

    let m = noisy_fsgcc(11);
    let (rows, cols) = (m.rows(), m.cols());
    let a = m.entries();
    let norm = frobenius(a);
    let f = svd_fsgcc(&m);
    let residual = |b: &[Complex64]| frobenius(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    let optimum = residual(&f.reconstruct(1));
    let tail = f.singular_values[1..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let mut r = rng(77);
    let mut beaten_by = 0;
    for k in 0..competitors {
        let (x, y): (Vec<Complex64>, Vec<Complex64>) = if k % 2 == 0 {
            (random_complex(&mut r, rows), random_complex(&mut r, cols))
        } else {
            let nx = random_complex(&mut r, rows);
            let ny = random_complex(&mut r, cols);
            (
                f.u[0].iter().zip(nx).map(|(u, n)| u + n * 1e-3).collect(),
                f.v[0].iter().zip(ny).map(|(v, n)| v + n * 1e-3).collect(),
            )
        };
        let mut b: Vec<Complex64> = (0..rows * cols).map(|i| x[i / cols] * y[i % cols].conj()).collect();
        let alpha = inner(&b, a) / inner(&b, &b);
        b.iter_mut().for_each(|v| *v *= alpha);
        beaten_by += usize::from(residual(&b) < optimum - 1e-9 * norm);
    }
    SvdReport {
        cases,
        orthonormality: orth,
        reconstruction: rec,
        optimum_mismatch: (optimum - tail).abs() / norm,
        competitors,
        beaten_by,
    }
}

fn random_tensor(shape: [usize; 4], seed: u64, positive: bool) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if positive { r.gen_range(0.0..1.0) } else { gaussian(&mut r) })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradientReport {
    /// Parameters compared by relative error (non-vanishing gradient).
    pub compared: usize,
    pub max_relative_error: f64,
    /// Largest |analytic − numeric| among entries where both vanish.
    pub max_vanishing_abs_error: f64,
    /// Samples whose gradient vanished in both estimates.
    pub vanishing: usize,
}

/// Central differences (step `h`) against backprop on random parameters of
/// the reduced network, batch of three 8×16 inputs in train mode, until
/// `samples` non-vanishing gradients have been compared. Entries whose
/// gradients are both below 1e-9 (conv biases cancelled by batch norm, dead
/// units) are compared absolutely and counted separately.
pub fn reduced_gradient_check(samples: usize, h: f64) -> GradientReport {
    let mut model = UNetModel::new(UNetArchitecture::reduced(), 42).unwrap();
    model.set_mode(Mode::Train);
    // lift the output pre-activations clear of the final ReLU's kink, which
    // would otherwise zero every gradient for this seed
    model.parameters_mut().last_mut().unwrap().iter_mut().for_each(|b| *b = 1.0);
    let shape = [3, 1, 8, 16];
    let x = random_tensor(shape, 1, false);
    let t = random_tensor(shape, 2, true);
    let (_, grads) = model.backward(&x, &t).unwrap();
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let loss = |m: &mut UNetModel| mse_loss(&m.forward(&x).unwrap(), &t).unwrap();
    let mut r = rng(3);
    let mut report = GradientReport {
        compared: 0,
        max_relative_error: 0.0,
        max_vanishing_abs_error: 0.0,
        vanishing: 0,
    };
    // vanishing entries (biases ahead of batch norm, dead units) do not count
    for _ in 0..20 * samples {
        if report.compared == samples {
            break;
        }
        let (mut g, mut i) = (0, r.gen_range(0..total));
        while i >= sizes[g] {
            i -= sizes[g];
            g += 1;
        }
        let analytic = grads.blocks[g][i];
        let original = model.parameters()[g][i];
        model.parameters_mut()[g][i] = original + h;
        let up = loss(&mut model);
        model.parameters_mut()[g][i] = original - h;
        let down = loss(&mut model);
        model.parameters_mut()[g][i] = original;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-9 {
            report.vanishing += 1;
            report.max_vanishing_abs_error = report.max_vanishing_abs_error.max((analytic - numeric).abs());
        } else {
            report.compared += 1;
            report.max_relative_error = report.max_relative_error.max((analytic - numeric).abs() / scale);
        }
    }
    report
}
