//! Frequency-sliding GCC: a stack of sub-band GCC-PHAT vectors obtained by
//! sliding a spectral window across the PHAT cross-spectrum.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{fft_in_place, is_power_of_two, Spectrum, WindowKind};
use crate::error::FsGccError;
use crate::gcc::{argmax_lag, center_lags, phat_spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsGccConfig {
    /// DFT length `N`.
    pub dft_length: usize,
    /// Number of non-zero window bins `B`.
    pub window_support: usize,
    /// Band hop `M` in bins.
    pub hop: usize,
    /// Number of bands `L`.
    pub band_count: usize,
    #[serde(default)]
    pub window_shape: WindowKind,
}

impl Default for FsGccConfig {
    /// `N = 2048, B = 128, M = 29, L = 32`, Hann-shaped window.
    fn default() -> Self {
        Self {
            dft_length: 2048,
            window_support: 128,
            hop: 29,
            band_count: 32,
            window_shape: WindowKind::Hann,
        }
    }
}

impl FsGccConfig {
    /// Derives `L` so that every band centre stays below Nyquist:
    /// `L = ⌊(π − B_Φ + M_Φ)/M_Φ⌋` with `B_Φ = πB/N`, `M_Φ = 2πM/N`.
    pub fn with_auto_band_count(
        dft_length: usize,
        window_support: usize,
        hop: usize,
        window_shape: WindowKind,
    ) -> Result<Self, FsGccError> {
        if hop == 0 || dft_length == 0 {
            return Err(FsGccError::InvalidConfig("hop and N must be positive".into()));
        }
        let n = dft_length as f64;
        let support = PI * window_support as f64 / n;
        let step = 2.0 * PI * hop as f64 / n;
        let bands = ((PI - support + step) / step + 1e-12).floor();
        if bands < 1.0 {
            return Err(FsGccError::InvalidConfig("window wider than the spectrum".into()));
        }
        let cfg = Self {
            dft_length,
            window_support,
            hop,
            band_count: bands as usize,
            window_shape,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FsGccError> {
        let n = self.dft_length;
        if !is_power_of_two(n) {
            return Err(FsGccError::InvalidConfig(format!("N = {n} is not a power of two")));
        }
        if self.window_support == 0 || self.window_support > n {
            return Err(FsGccError::InvalidConfig(format!(
                "window support B = {} outside [1, N = {n}]",
                self.window_support
            )));
        }
        if self.hop == 0 || self.band_count == 0 {
            return Err(FsGccError::InvalidConfig("M and L must be at least 1".into()));
        }
        if (self.band_count - 1) * self.hop > n / 2 {
            return Err(FsGccError::InvalidConfig(format!(
                "band centre (L-1)·M = {} is beyond Nyquist bin {}",
                (self.band_count - 1) * self.hop,
                n / 2
            )));
        }
        Ok(())
    }
}

/// Signed frequency offset of bin `k`: `k` below Nyquist, `k − N` above.
fn signed_bin(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Length-`N` spectral window with exactly `B` non-zero bins and
/// `Φ[k] = Φ[N−k]`.
///
/// Odd `B` occupies offsets `0, ±1, …, ±(B−1)/2`. Even `B < N` occupies
/// `±1, …, ±B/2` (bin 0 itself stays empty). `B = N` covers every bin.
/// The Hann shape decays with the offset and has unit peak.
pub fn spectral_window(config: &FsGccConfig) -> Result<Vec<f64>, FsGccError> {
    config.validate()?;
    let n = config.dft_length;
    let b = config.window_support;
    let mut phi = vec![0.0; n];
    if b == n {
        for (k, v) in phi.iter_mut().enumerate() {
            *v = match config.window_shape {
                WindowKind::Rectangular => 1.0,
                WindowKind::Hann => {
                    let x = signed_bin(k, n).unsigned_abs() as f64 / (n / 2 + 1) as f64;
                    0.5 * (1.0 + (PI * x).cos())
                }
            };
        }
        return Ok(phi);
    }
    // (first offset, last offset, taper span)
    let (first, last, span) = if b % 2 == 1 {
        (0, (b - 1) / 2, ((b + 1) / 2) as f64)
    } else {
        (1, b / 2, (b / 2) as f64)
    };
    for j in first..=last {
        let value = match config.window_shape {
            WindowKind::Rectangular => 1.0,
            WindowKind::Hann => 0.5 * (1.0 + (PI * (j - first) as f64 / span).cos()),
        };
        phi[j % n] = value;
        phi[(n - j) % n] = value;
    }
    Ok(phi)
}

/// Complex `L × N` FS-GCC; rows are sub-band GCCs with zero lag at column `N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FsGccMatrix {
    entries: Vec<Complex64>,
    config: FsGccConfig,
}

impl FsGccMatrix {
    pub fn from_rows(entries: Vec<Complex64>, config: FsGccConfig) -> Result<Self, FsGccError> {
        if entries.len() != config.band_count * config.dft_length {
            return Err(FsGccError::Shape(format!(
                "{} entries for {}x{}",
                entries.len(),
                config.band_count,
                config.dft_length
            )));
        }
        Ok(Self { entries, config })
    }

    pub fn rows(&self) -> usize {
        self.config.band_count
    }

    pub fn cols(&self) -> usize {
        self.config.dft_length
    }

    pub fn config(&self) -> &FsGccConfig {
        &self.config
    }

    pub fn row(&self, l: usize) -> &[Complex64] {
        let n = self.cols();
        &self.entries[l * n..(l + 1) * n]
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn magnitude(&self) -> RealMatrix {
        RealMatrix {
            rows: self.rows(),
            cols: self.cols(),
            data: self.entries.iter().map(|c| c.norm()).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|c| c * alpha).collect(),
            config: self.config,
        }
    }
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, FsGccError> {
        if data.len() != rows * cols {
            return Err(FsGccError::Shape(format!(
                "{} values for {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.data[l * self.cols..(l + 1) * self.cols]
    }

    pub fn row_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.data[l * self.cols..(l + 1) * self.cols]
    }

    /// Columns `[center − width/2, center + width/2)`, i.e. lags
    /// `−width/2 .. width/2` when `center` is the zero-lag column.
    pub fn crop_columns(&self, center: usize, width: usize) -> Result<Self, FsGccError> {
        let start = center
            .checked_sub(width / 2)
            .filter(|s| s + width <= self.cols)
            .ok_or_else(|| {
                FsGccError::Shape(format!(
                    "crop of width {width} around column {center} exceeds {} columns",
                    self.cols
                ))
            })?;
        let mut data = Vec::with_capacity(self.rows * width);
        for l in 0..self.rows {
            data.extend_from_slice(&self.row(l)[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Row-wise mean, a lag sequence of length `cols`.
    pub fn band_average(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.cols];
        for l in 0..self.rows {
            for (a, v) in avg.iter_mut().zip(self.row(l)) {
                *a += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        avg
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// FS-GCC of two frame spectra.
///
/// Row `l` is `(1/N) Σ_k Ψ[k + lM] Φ[k] e^{j2πkn/N}` with `Ψ` the PHAT
/// spectrum. Window bins whose absolute frequency `lM + k` lies above
/// Nyquist contribute nothing.
pub fn fs_gcc(
    x1_spec: &Spectrum,
    x2_spec: &Spectrum,
    config: &FsGccConfig,
) -> Result<FsGccMatrix, FsGccError> {
    let phi = spectral_window(config)?;
    let n = config.dft_length;
    for len in [x1_spec.dft_length(), x2_spec.dft_length()] {
        if len != n {
            return Err(FsGccError::LengthMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let psi = phat_spectrum(x1_spec, x2_spec).map_err(|e| FsGccError::Shape(e.to_string()))?;
    let psi = psi.bins();
    let support: Vec<usize> = (0..n).filter(|&k| phi[k] != 0.0).collect();
    let mut entries = Vec::with_capacity(config.band_count * n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for l in 0..config.band_count {
        let shift = l * config.hop;
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for &k in &support {
            if shift as i64 + signed_bin(k, n) > (n / 2) as i64 {
                continue;
            }
            buf[k] = psi[(k + shift) % n] * phi[k];
        }
        fft_in_place(&mut buf, true).map_err(|e| FsGccError::Shape(e.to_string()))?;
        entries.extend(center_lags(&buf));
    }
    FsGccMatrix::from_rows(entries, *config)
}

/// TDoA from the row-wise average of an FS-GCC magnitude (zero lag at
/// column `cols/2`).
pub fn band_average_tdoa(magnitude: &RealMatrix, max_lag: usize) -> Result<i64, FsGccError> {
    if magnitude.rows == 0 || magnitude.data.iter().all(|v| *v == 0.0) {
        return Err(FsGccError::Degenerate);
    }
    argmax_lag(&magnitude.band_average(), max_lag).map_err(|e| match e {
        crate::error::GccError::Degenerate => FsGccError::Degenerate,
        other => FsGccError::Shape(other.to_string()),
    })
}
