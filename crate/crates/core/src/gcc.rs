//! GCC-PHAT and TDoA picking.

use num_complex::Complex64;

use crate::dsp::{fft_any_length, fft_in_place, SampleBuffer, Spectrum};
use crate::error::GccError;

/// Guard added to the PHAT denominator.
pub const PHAT_EPSILON: f64 = 1e-12;

/// Real cross-correlation over lags `[-N/2, N/2)`, zero lag stored at `N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GccVector {
    values: Vec<f64>,
    degenerate: bool,
}

impl GccVector {
    /// Wraps an already centred lag sequence.
    pub fn from_centered(values: Vec<f64>) -> Self {
        let degenerate = values.iter().all(|v| *v == 0.0);
        Self { values, degenerate }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dft_length(&self) -> usize {
        self.values.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn center(&self) -> usize {
        self.values.len() / 2
    }

    /// Value at lag `tau`, with lags wrapping modulo `N`.
    pub fn at(&self, tau: i64) -> f64 {
        let n = self.values.len() as i64;
        let idx = (self.center() as i64 + tau).rem_euclid(n);
        self.values[idx as usize]
    }
}

/// `X1·conj(X2) / (|X1·X2| + ε)` per bin.
pub fn phat_spectrum(x1: &Spectrum, x2: &Spectrum) -> Result<Spectrum, GccError> {
    if x1.dft_length() != x2.dft_length() {
        return Err(GccError::LengthMismatch(x1.dft_length(), x2.dft_length()));
    }
    let bins = x1
        .bins()
        .iter()
        .zip(x2.bins())
        .map(|(a, b)| {
            let cross = a * b.conj();
            cross / (cross.norm() + PHAT_EPSILON)
        })
        .collect();
    Ok(Spectrum::new(bins))
}

/// Moves lag 0 from index 0 to index `N/2`.
pub(crate) fn center_lags<T: Copy>(raw: &[T]) -> Vec<T> {
    let n = raw.len();
    let half = n / 2;
    (0..n).map(|i| raw[(i + n - half) % n]).collect()
}

/// Inverse transform of a PHAT spectrum, real part, zero lag centred.
pub fn gcc_from_phat(phat: &Spectrum) -> Result<GccVector, GccError> {
    let mut buf = phat.bins().to_vec();
    fft_in_place(&mut buf, true)?;
    let real: Vec<f64> = buf.iter().map(|c| c.re).collect();
    Ok(GccVector::from_centered(center_lags(&real)))
}

/// GCC-PHAT of two equally long (power-of-two) time frames.
pub fn gcc_phat(x1: &[f64], x2: &[f64]) -> Result<GccVector, GccError> {
    if x1.len() != x2.len() {
        return Err(GccError::LengthMismatch(x1.len(), x2.len()));
    }
    let s1 = Spectrum::from_real(x1)?;
    let s2 = Spectrum::from_real(x2)?;
    gcc_from_phat(&phat_spectrum(&s1, &s2)?)
}

/// Argmax over lags `|τ| ≤ max_lag` of a centred sequence.
///
/// Ties go to the smallest `|τ|`, and to the negative lag at equal `|τ|`.
pub fn argmax_lag(centered: &[f64], max_lag: usize) -> Result<i64, GccError> {
    let n = centered.len();
    let half = n / 2;
    if max_lag > half {
        return Err(GccError::MaxLagTooLarge { max_lag, half });
    }
    let window_max = max_lag.min(n - 1 - half);
    let lags = std::iter::once(0i64).chain((1..=max_lag as i64).flat_map(|k| [-k, k]));
    let mut best: Option<(i64, f64)> = None;
    let mut any_nonzero = false;
    for tau in lags {
        if tau > window_max as i64 {
            continue;
        }
        let v = centered[(half as i64 + tau) as usize];
        any_nonzero |= v != 0.0;
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((tau, v));
        }
    }
    match best {
        Some((tau, _)) if any_nonzero => Ok(tau),
        _ => Err(GccError::Degenerate),
    }
}

pub fn estimate_tdoa_gcc(gcc: &GccVector, max_lag: usize) -> Result<i64, GccError> {
    if gcc.is_degenerate() {
        return Err(GccError::Degenerate);
    }
    argmax_lag(gcc.values(), max_lag)
}

/// Full width at half maximum of the normalised (unbiased) autocorrelation,
/// in samples.
pub fn correlation_time(signal: &SampleBuffer) -> Result<f64, GccError> {
    let x = signal.samples();
    let n = x.len();
    if n == 0 || x.iter().all(|v| *v == 0.0) {
        return Err(GccError::SilentSignal);
    }
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(size, Complex64::new(0.0, 0.0));
    fft_any_length(&mut buf, false);
    for b in buf.iter_mut() {
        *b = Complex64::new(b.norm_sqr(), 0.0);
    }
    fft_any_length(&mut buf, true);
    let r0 = buf[0].re / n as f64;
    let max_lag = n / 2;
    let mut prev = 1.0;
    for k in 1..=max_lag {
        let r = buf[k].re / (n - k) as f64 / r0;
        if r < 0.5 {
            // linear interpolation of the half-height crossing
            let frac = (prev - 0.5) / (prev - r);
            let half_width = (k - 1) as f64 + frac;
            return Ok(2.0 * half_width);
        }
        prev = r;
    }
    Err(GccError::NoDecay)
}
