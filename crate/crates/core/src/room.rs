//! Shoebox room simulation with the image-source method.
//!
//! Walls share one pressure reflection coefficient, chosen so the image
//! lattice's own energy decay hits the target T60. Every image contributes an 81-tap
//! Hann-windowed sinc centred on its exact (fractional) arrival time.

use std::f64::consts::{LN_10, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{convolve, SampleBuffer};
use crate::error::RoomError;

pub type Point3 = [f64; 3];

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
pub const SINC_TAPS: usize = 81;
const SINC_HALF: usize = SINC_TAPS / 2;

/// Geometry and acoustics of one source / microphone-pair scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSetup {
    pub room_dims: Point3,
    pub mic_1: Point3,
    pub mic_2: Point3,
    pub source: Point3,
    /// Reverberation time in seconds; zero means anechoic.
    pub t60: f64,
    /// Per-channel SNR in dB. `f64::INFINITY` disables the noise.
    pub snr_db: f64,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicIndex {
    First,
    Second,
}

impl MicIndex {
    fn number(self) -> usize {
        match self {
            MicIndex::First => 1,
            MicIndex::Second => 2,
        }
    }
}

/// Room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: f64,
}

impl Rir {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|x| x * x).sum()
    }
}

/// A single image source as seen from one microphone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub delay_samples: f64,
    pub amplitude: f64,
    pub order: u32,
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl RoomSetup {
    pub fn new(room_dims: Point3, mic_1: Point3, mic_2: Point3, source: Point3) -> Self {
        Self {
            room_dims,
            mic_1,
            mic_2,
            source,
            t60: 0.0,
            snr_db: f64::INFINITY,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            sample_rate: 44_100.0,
        }
    }

    pub fn with_t60(mut self, t60: f64) -> Self {
        self.t60 = t60;
        self
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.snr_db = snr_db;
        self
    }

    pub fn with_sample_rate(mut self, fs: f64) -> Self {
        self.sample_rate = fs;
        self
    }

    pub fn validate(&self) -> Result<(), RoomError> {
        if self.room_dims.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(RoomError::InvalidParameter(format!(
                "room dimensions {:?}",
                self.room_dims
            )));
        }
        for (what, p) in [
            ("microphone 1", self.mic_1),
            ("microphone 2", self.mic_2),
            ("source", self.source),
        ] {
            let inside = p
                .iter()
                .zip(&self.room_dims)
                .all(|(&x, &d)| x > 0.0 && x < d);
            if !inside {
                return Err(RoomError::OutsideRoom {
                    what,
                    position: p,
                    room: self.room_dims,
                });
            }
        }
        if distance(&self.mic_1, &self.mic_2) == 0.0 {
            return Err(RoomError::CoincidentMics);
        }
        if !(self.t60 >= 0.0) || !self.t60.is_finite() {
            return Err(RoomError::InvalidParameter(format!("t60 = {}", self.t60)));
        }
        if !(self.speed_of_sound > 0.0) || !(self.sample_rate > 0.0) {
            return Err(RoomError::InvalidParameter(
                "speed of sound and sample rate must be positive".into(),
            ));
        }
        if self.snr_db.is_nan() {
            return Err(RoomError::InvalidParameter("snr_db is NaN".into()));
        }
        Ok(())
    }

    pub fn mic(&self, index: MicIndex) -> Point3 {
        match index {
            MicIndex::First => self.mic_1,
            MicIndex::Second => self.mic_2,
        }
    }

    /// TDoA in fractional samples before rounding.
    pub fn exact_tdoa(&self) -> f64 {
        (distance(&self.source, &self.mic_1) - distance(&self.source, &self.mic_2))
            / self.speed_of_sound
            * self.sample_rate
    }

    /// Largest physically admissible |TDoA| in samples, `ceil(‖m1−m2‖·fs/c)`.
    pub fn max_physical_lag(&self) -> usize {
        (distance(&self.mic_1, &self.mic_2) / self.speed_of_sound * self.sample_rate).ceil()
            as usize
    }

    pub fn swapped_mics(&self) -> Self {
        let mut s = self.clone();
        std::mem::swap(&mut s.mic_1, &mut s.mic_2);
        s
    }
}

/// Ground-truth TDoA in samples, rounded half away from zero.
pub fn true_tdoa(setup: &RoomSetup) -> i64 {
    setup.exact_tdoa().round() as i64
}

/// Uniform pressure reflection coefficient for a target T60 (Eyring).
pub fn reflection_coefficient(room_dims: &Point3, t60: f64, speed_of_sound: f64) -> f64 {
    if t60 <= 0.0 {
        return 0.0;
    }
    // T60 scales as 1/a for beta = exp(-a), so one model evaluation at a = 1
    // fixes the coefficient.
    let t60_at_unit = modelled_t60(room_dims, speed_of_sound, 1.0);
    (-t60_at_unit / t60).exp()
}

/// Eyring's formula, `T60 = 24 ln10 V / (-c S ln(1 - alpha))` with
/// `beta = sqrt(1 - alpha)`.
pub fn eyring_reflection_coefficient(room_dims: &Point3, t60: f64, speed_of_sound: f64) -> f64 {
    if t60 <= 0.0 {
        return 0.0;
    }
    let [lx, ly, lz] = *room_dims;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    (-12.0 * LN_10 * volume / (speed_of_sound * surface * t60)).exp()
}

const MODEL_DIRECTIONS: usize = 4096;
const MODEL_FIT_POINTS: usize = 256;

/// T60 that the image lattice produces for `beta = exp(-a)`.
///
/// An image reached along unit direction `u` after time `t` has undergone
/// about `c t (|ux|/Lx + |uy|/Ly + |uz|/Lz)` reflections; image density
/// cancels spherical spreading, so the energy envelope is the direction
/// average of `beta^(2n)`. Axial paths decay slower than the mean, which is
/// why Eyring's single-rate estimate runs long in an image-source room.
pub fn modelled_t60(room_dims: &Point3, speed_of_sound: f64, a: f64) -> f64 {
    let golden = PI * (3.0 - 5f64.sqrt());
    let rates: Vec<f64> = (0..MODEL_DIRECTIONS)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / MODEL_DIRECTIONS as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let g = (r * phi.cos()).abs() / room_dims[0]
                + (r * phi.sin()).abs() / room_dims[1]
                + z.abs() / room_dims[2];
            2.0 * a * speed_of_sound * g
        })
        .collect();
    // backward-integrated envelope, closed form per direction
    let edc = |t: f64| rates.iter().map(|k| (-k * t).exp() / k).sum::<f64>();
    let total = edc(0.0);
    let db = |t: f64| 10.0 * (edc(t) / total).log10();
    let crossing = |level: f64| {
        let mut hi = 1.0 / rates.iter().cloned().fold(f64::INFINITY, f64::min);
        while db(hi) > level {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if db(mid) > level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (t5, t35) = (crossing(-5.0), crossing(-35.0));
    let pts: Vec<(f64, f64)> = (0..MODEL_FIT_POINTS)
        .map(|i| {
            let t = t5 + (t35 - t5) * i as f64 / (MODEL_FIT_POINTS - 1) as f64;
            (t, db(t))
        })
        .collect();
    -60.0 / fit_slope(&pts)
}

fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Smallest order beyond which every image is more than 60 dB below the
/// direct path in energy.
pub fn default_max_order(beta: f64) -> u32 {
    if beta <= 0.0 {
        return 0;
    }
    if beta >= 1.0 {
        return u32::MAX;
    }
    (-3.0 * LN_10 / beta.ln()).ceil().max(0.0) as u32
}

/// Number of taps needed so the response spans the direct path plus T60.
pub fn rir_length(setup: &RoomSetup, mic: MicIndex) -> usize {
    let direct =
        distance(&setup.source, &setup.mic(mic)) / setup.speed_of_sound * setup.sample_rate;
    (direct + setup.t60 * setup.sample_rate).ceil() as usize + SINC_HALF + 1
}

/// Visits every image within `max_order` reflections whose arrival is
/// earlier than `max_delay` samples.
pub fn for_each_image(
    setup: &RoomSetup,
    mic: MicIndex,
    max_order: u32,
    max_delay: f64,
    mut visit: impl FnMut(ImageSource),
) {
    let beta = reflection_coefficient(&setup.room_dims, setup.t60, setup.speed_of_sound);
    let order_cap = if beta == 0.0 { 0 } else { max_order };
    let receiver = setup.mic(mic);
    let src = setup.source;
    let dims = setup.room_dims;
    let samples_per_metre = setup.sample_rate / setup.speed_of_sound;
    let max_dist = max_delay / samples_per_metre;
    let max_dist_sq = max_dist * max_dist;
    let bound = |l: f64| ((max_dist / (2.0 * l)).ceil() as i64 + 1).min(order_cap as i64 + 1);
    let (nx, ny, nz) = (bound(dims[0]), bound(dims[1]), bound(dims[2]));

    // per-axis offsets and reflection counts
    let axis = |ax: usize, m: i64, q: i64| -> (f64, u32) {
        let offset =
            (1 - 2 * q) as f64 * src[ax] - receiver[ax] + 2.0 * m as f64 * dims[ax];
        (offset, ((m - q).abs() + m.abs()) as u32)
    };

    for mx in -nx..=nx {
        for qx in 0..2 {
            let (dx, ox) = axis(0, mx, qx);
            if ox > order_cap || dx * dx > max_dist_sq {
                continue;
            }
            for my in -ny..=ny {
                for qy in 0..2 {
                    let (dy, oy) = axis(1, my, qy);
                    let dxy = dx * dx + dy * dy;
                    if ox + oy > order_cap || dxy > max_dist_sq {
                        continue;
                    }
                    for mz in -nz..=nz {
                        for qz in 0..2 {
                            let (dz, oz) = axis(2, mz, qz);
                            let order = ox + oy + oz;
                            let d_sq = dxy + dz * dz;
                            if order > order_cap || d_sq > max_dist_sq {
                                continue;
                            }
                            let d = d_sq.sqrt();
                            let amplitude = beta.powi(order as i32) / (4.0 * PI * d);
                            visit(ImageSource {
                                delay_samples: d * samples_per_metre,
                                amplitude,
                                order,
                            });
                        }
                    }
                }
            }
        }
    }
}

/// All images of the response, mostly for inspection and tests.
pub fn image_sources(setup: &RoomSetup, mic: MicIndex, max_order: u32) -> Vec<ImageSource> {
    let len = rir_length(setup, mic);
    let mut out = Vec::new();
    for_each_image(setup, mic, max_order, (len - SINC_HALF - 1) as f64, |img| {
        out.push(img)
    });
    out
}

/// Adds `amplitude · w(n − delay) · sinc(n − delay)` over 81 taps.
fn add_fractional_impulse(taps: &mut [f64], delay: f64, amplitude: f64) {
    let centre = delay.round() as i64;
    if (delay - centre as f64).abs() < 1e-9 {
        if let Some(t) = usize::try_from(centre).ok().and_then(|c| taps.get_mut(c)) {
            *t += amplitude;
        }
        return;
    }
    let first = centre - SINC_HALF as i64;
    let sin_pi_delay = (PI * delay).sin();
    let step = 2.0 * PI / SINC_TAPS as f64;
    let (step_sin, step_cos) = step.sin_cos();
    let theta0 = step * (first as f64 - delay);
    let (mut s, mut c) = theta0.sin_cos();
    for i in 0..SINC_TAPS as i64 {
        let n = first + i;
        if n >= 0 && (n as usize) < taps.len() {
            let t = n as f64 - delay;
            let sinc = if t.abs() < 1e-12 {
                1.0
            } else {
                // sin(pi(n - D)) = -(-1)^n sin(pi D)
                let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
                sign * sin_pi_delay / (PI * t)
            };
            let window = 0.5 * (1.0 + c);
            taps[n as usize] += amplitude * window * sinc;
        }
        let (ns, nc) = (s * step_cos + c * step_sin, c * step_cos - s * step_sin);
        s = ns;
        c = nc;
    }
}

/// Impulse response from the source to one microphone.
pub fn image_source_rir(
    setup: &RoomSetup,
    mic: MicIndex,
    max_order: Option<u32>,
) -> Result<Rir, RoomError> {
    setup.validate()?;
    let d = distance(&setup.source, &setup.mic(mic));
    if d < 1e-9 {
        return Err(RoomError::SourceOnMic(mic.number()));
    }
    let beta = reflection_coefficient(&setup.room_dims, setup.t60, setup.speed_of_sound);
    let order = max_order.unwrap_or_else(|| default_max_order(beta));
    let len = rir_length(setup, mic);
    let mut taps = vec![0.0; len];
    let max_delay = (len - SINC_HALF - 1) as f64;
    for_each_image(setup, mic, order, max_delay, |img| {
        add_fractional_impulse(&mut taps, img.delay_samples, img.amplitude)
    });
    Ok(Rir {
        taps,
        sample_rate: setup.sample_rate,
    })
}

/// Convolves the source with both responses and adds independent white
/// Gaussian noise at the configured per-channel SNR.
///
/// Output buffers have the length of the source signal.
pub fn render_mic_signals(
    setup: &RoomSetup,
    source_signal: &SampleBuffer,
    noise_seed: u64,
) -> Result<(SampleBuffer, SampleBuffer), RoomError> {
    setup.validate()?;
    if source_signal.power() == 0.0 {
        return Err(RoomError::SilentSource);
    }
    let n = source_signal.len();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut render = |mic: MicIndex| -> Result<SampleBuffer, RoomError> {
        let rir = image_source_rir(setup, mic, None)?;
        let mut x = convolve(source_signal.samples(), &rir.taps, n);
        if setup.snr_db.is_finite() {
            let signal_power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let mut noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let drawn = noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let target = signal_power / 10f64.powf(setup.snr_db / 10.0);
            let scale = if drawn > 0.0 { (target / drawn).sqrt() } else { 0.0 };
            for (xi, wi) in x.iter_mut().zip(noise.iter_mut()) {
                *xi += *wi * scale;
            }
        }
        Ok(SampleBuffer::new(x, setup.sample_rate)?)
    };
    let x1 = render(MicIndex::First)?;
    let x2 = render(MicIndex::Second)?;
    Ok((x1, x2))
}

/// Schroeder backward-integrated energy decay curve in dB (0 dB at n = 0).
pub fn energy_decay_curve_db(taps: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; taps.len()];
    let mut acc = 0.0;
    for i in (0..taps.len()).rev() {
        acc += taps[i] * taps[i];
        edc[i] = acc;
    }
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|&e| {
            if total > 0.0 && e > 0.0 {
                10.0 * (e / total).log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// T60 estimate from a line fit to the decay curve between −5 and −35 dB.
pub fn estimate_t60(rir: &Rir) -> Option<f64> {
    let edc = energy_decay_curve_db(&rir.taps);
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter(|(_, &db)| db <= -5.0 && db >= -35.0)
        .map(|(i, &db)| (i as f64 / rir.sample_rate, db))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let slope = fit_slope(&pts);
    (slope < 0.0).then(|| -60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> RoomSetup {
        RoomSetup::new(
            [6.0, 7.0, 3.0],
            [2.0, 3.0, 1.25],
            [2.4, 3.0, 1.25],
            [4.0, 5.0, 1.25],
        )
    }

    #[test]
    fn equidistant_source_has_zero_tdoa() {
        let s = RoomSetup::new([6.0, 7.0, 3.0], [2.0, 3.0, 1.2], [4.0, 3.0, 1.2], [3.0, 5.5, 1.2]);
        assert_eq!(true_tdoa(&s), 0);
    }

    #[test]
    fn one_metre_path_difference() {
        // 1 m / 343 m/s * 44100 Hz = 128.57 -> 129
        let s = RoomSetup::new([10.0, 4.0, 3.0], [1.0, 2.0, 1.5], [8.0, 2.0, 1.5], [5.0, 2.0, 1.5]);
        assert!((s.exact_tdoa() - 128.571_428_571).abs() < 1e-6);
        assert_eq!(true_tdoa(&s), 129);
        assert_eq!(true_tdoa(&s.swapped_mics()), -129);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(2.5f64.round(), 3.0);
        assert_eq!((-2.5f64).round(), -3.0);
    }

    #[test]
    fn validation_catches_bad_geometry() {
        let mut s = setup();
        s.source = [7.0, 1.0, 1.0];
        assert!(matches!(s.validate(), Err(RoomError::OutsideRoom { .. })));
        let mut s = setup();
        s.mic_2 = s.mic_1;
        assert_eq!(s.validate(), Err(RoomError::CoincidentMics));
        let mut s = setup();
        s.source = s.mic_1;
        assert_eq!(
            image_source_rir(&s, MicIndex::First, None),
            Err(RoomError::SourceOnMic(1))
        );
    }

    #[test]
    fn anechoic_rir_is_single_scaled_impulse() {
        // 3.43 m at 343 m/s and 44.1 kHz is exactly 441 samples
        let s = RoomSetup::new([8.0, 8.0, 3.0], [1.0, 1.0, 1.5], [1.5, 1.0, 1.5], [4.43, 1.0, 1.5]);
        let rir = image_source_rir(&s, MicIndex::First, None).unwrap();
        let (peak, value) = rir
            .taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        assert!((peak as i64 - 441).abs() <= 1);
        assert!((value - 1.0 / (4.0 * PI * 3.43)).abs() < 1e-9);
        let nonzero = rir.taps.iter().filter(|x| **x != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn coefficient_grows_with_t60() {
        let d = [6.0, 7.0, 3.0];
        let b02 = reflection_coefficient(&d, 0.2, 343.0);
        let b10 = reflection_coefficient(&d, 1.0, 343.0);
        assert!(0.0 < b02 && b02 < b10 && b10 < 1.0);
        assert_eq!(reflection_coefficient(&d, 0.0, 343.0), 0.0);
        let k = default_max_order(b10);
        assert!(b10.powi(k as i32) <= 1e-3);
        assert!(b10.powi(k as i32 - 1) > 1e-3);
    }

    #[test]
    fn direct_path_dominates_every_image() {
        let s = setup().with_t60(0.6);
        let direct = 1.0 / (4.0 * PI * distance(&s.source, &s.mic_1));
        let images = image_sources(&s, MicIndex::First, 12);
        assert!(images.len() > 100);
        let zero_order: Vec<_> = images.iter().filter(|i| i.order == 0).collect();
        assert_eq!(zero_order.len(), 1);
        assert!((zero_order[0].amplitude - direct).abs() < 1e-15);
        assert!(images.iter().all(|i| i.amplitude <= direct));
    }

    #[test]
    fn schroeder_decay_matches_target_t60() {
        for (dims, t) in [([6.0, 7.0, 3.0], 0.5), ([6.0, 7.0, 3.0], 0.2), ([9.0, 8.0, 4.0], 1.0)] {
            let mut s = setup().with_t60(t);
            s.room_dims = dims;
            let rir = image_source_rir(&s, MicIndex::First, None).unwrap();
            let t60 = estimate_t60(&rir).unwrap();
            assert!((t60 - t).abs() <= 0.2 * t, "target {t}, estimated {t60}");
        }
    }

    #[test]
    fn calibrated_coefficient_absorbs_more_than_eyring() {
        let d = [6.0, 7.0, 3.0];
        let ey = eyring_reflection_coefficient(&d, 0.5, 343.0);
        let cal = reflection_coefficient(&d, 0.5, 343.0);
        assert!(cal < ey && cal > 0.5 * ey);
        // the model is exactly inverse-proportional in a
        let t1 = modelled_t60(&d, 343.0, 1.0);
        let t2 = modelled_t60(&d, 343.0, 2.0);
        assert!((t1 / t2 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn mirror_placements_give_equal_energy() {
        let dims = [6.0, 7.0, 3.0];
        let a = RoomSetup::new(dims, [1.5, 2.0, 1.2], [1.9, 2.0, 1.2], [2.5, 4.0, 1.4]).with_t60(0.3);
        let mirror = |p: Point3| [dims[0] - p[0], p[1], p[2]];
        let b = RoomSetup::new(dims, mirror(a.mic_1), mirror(a.mic_2), mirror(a.source))
            .with_t60(0.3);
        let ea = image_source_rir(&a, MicIndex::First, None).unwrap().energy();
        let eb = image_source_rir(&b, MicIndex::First, None).unwrap().energy();
        assert!(((ea - eb) / ea).abs() < 1e-6);
    }

    #[test]
    fn tdoa_bounded_by_mic_spacing() {
        let s = setup();
        for x in [0.5, 1.0, 2.0, 3.0, 5.5] {
            for y in [0.5, 3.0, 6.5] {
                let mut t = s.clone();
                t.source = [x, y, 2.0];
                assert!(true_tdoa(&t).unsigned_abs() as usize <= t.max_physical_lag());
            }
        }
    }
}
