//! FFT, window and STFT primitives shared by the rest of the crate.
//!
//! Everything here works in `f64`. Forward transforms are unnormalized and
//! inverse transforms carry the `1/N` factor, so `inverse(forward(x)) == x`.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::DspError;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// A real-valued discrete-time signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    samples: Vec<f64>,
    sample_rate_hz: f64,
}

impl SampleBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self, DspError> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(DspError::InvalidSampleRate(sample_rate_hz));
        }
        if let Some(index) = samples.iter().position(|x| !x.is_finite()) {
            return Err(DspError::NonFinite { index });
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Mean power `Σx²/len`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }
}

/// DFT bins of a length-`N` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(bins: Vec<Complex64>) -> Self {
        Self { bins }
    }

    /// Forward transform of a real frame. The length must be a power of two.
    pub fn from_real(frame: &[f64]) -> Result<Self, DspError> {
        let mut bins: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft_in_place(&mut bins, false)?;
        Ok(Self { bins })
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn dft_length(&self) -> usize {
        self.bins.len()
    }

    pub fn into_bins(self) -> Vec<Complex64> {
        self.bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn samples(self, n: usize) -> Result<Vec<f64>, DspError> {
        match self {
            WindowKind::Hann => hann_window(n),
            WindowKind::Rectangular => {
                if n == 0 {
                    return Err(DspError::WindowTooShort(n));
                }
                Ok(vec![1.0; n])
            }
        }
    }
}

/// Short-time spectra of a signal.
#[derive(Debug, Clone)]
pub struct StftFrameSet {
    pub frames: Vec<Spectrum>,
    pub frame_length: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
}

impl StftFrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Radix-agnostic FFT restricted to power-of-two lengths.
///
/// The inverse includes the `1/N` scaling.
pub fn fft(buffer: &[Complex64], inverse: bool) -> Result<Vec<Complex64>, DspError> {
    let mut out = buffer.to_vec();
    fft_in_place(&mut out, inverse)?;
    Ok(out)
}

pub fn fft_in_place(buffer: &mut [Complex64], inverse: bool) -> Result<(), DspError> {
    let n = buffer.len();
    if !is_power_of_two(n) {
        return Err(DspError::NotPowerOfTwo(n));
    }
    fft_any_length(buffer, inverse);
    Ok(())
}

/// Any-length transform used internally for convolution and autocorrelation.
pub(crate) fn fft_any_length(buffer: &mut [Complex64], inverse: bool) {
    let n = buffer.len();
    if n == 0 {
        return;
    }
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    plan.process(buffer);
    if inverse {
        let scale = 1.0 / n as f64;
        for x in buffer.iter_mut() {
            *x *= scale;
        }
    }
}

/// Symmetric Hann window, `w[i] = 0.5(1 - cos(2πi/(n-1)))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>, DspError> {
    if n < 2 {
        return Err(DspError::WindowTooShort(n));
    }
    let denom = (n - 1) as f64;
    let mut w: Vec<f64> = (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / denom).cos()))
        .collect();
    // force exact mirror symmetry
    for i in 0..n / 2 {
        w[n - 1 - i] = w[i];
    }
    Ok(w)
}

/// Hop size in samples for a frame length and overlap fraction.
pub fn hop_length(frame_length: usize, overlap_fraction: f64) -> Result<usize, DspError> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(DspError::InvalidOverlap(overlap_fraction));
    }
    let hop = (frame_length as f64 * (1.0 - overlap_fraction)).round() as usize;
    Ok(hop.max(1))
}

/// Start offsets of every complete frame; the trailing partial frame is dropped.
pub fn frame_starts(len: usize, frame_length: usize, hop: usize) -> Vec<usize> {
    if len < frame_length || hop == 0 {
        return Vec::new();
    }
    let count = (len - frame_length) / hop + 1;
    (0..count).map(|f| f * hop).collect()
}

/// Windows `samples[start..start+window.len()]` into a complex buffer.
pub fn windowed_frame(samples: &[f64], start: usize, window: &[f64]) -> Vec<Complex64> {
    samples[start..start + window.len()]
        .iter()
        .zip(window)
        .map(|(&x, &w)| Complex64::new(x * w, 0.0))
        .collect()
}

pub fn stft(
    buffer: &SampleBuffer,
    frame_length: usize,
    overlap_fraction: f64,
    window_kind: WindowKind,
) -> Result<StftFrameSet, DspError> {
    if !is_power_of_two(frame_length) {
        return Err(DspError::NotPowerOfTwo(frame_length));
    }
    let hop = hop_length(frame_length, overlap_fraction)?;
    if buffer.len() < frame_length {
        return Err(DspError::BufferShorterThanFrame {
            len: buffer.len(),
            frame_length,
        });
    }
    let window = window_kind.samples(frame_length)?;
    let frames = frame_starts(buffer.len(), frame_length, hop)
        .into_iter()
        .map(|start| {
            let mut bins = windowed_frame(buffer.samples(), start, &window);
            fft_in_place(&mut bins, false)?;
            Ok(Spectrum::new(bins))
        })
        .collect::<Result<Vec<_>, DspError>>()?;
    Ok(StftFrameSet {
        frames,
        frame_length,
        hop,
        window_kind,
    })
}

/// Linear convolution of two real sequences, truncated to `out_len` samples.
pub fn convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let full = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 64 {
        let mut out = vec![0.0; out_len.min(full)];
        for (i, &x) in a.iter().enumerate() {
            if i >= out.len() {
                break;
            }
            for (j, &y) in b.iter().enumerate() {
                if i + j >= out.len() {
                    break;
                }
                out[i + j] += x * y;
            }
        }
        out.resize(out_len, 0.0);
        return out;
    }
    let n = full.next_power_of_two();
    let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fft_any_length(&mut fa, false);
    fft_any_length(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_any_length(&mut fa, true);
    let mut out: Vec<f64> = fa.iter().take(out_len.min(full)).map(|c| c.re).collect();
    out.resize(out_len, 0.0);
    out
}
