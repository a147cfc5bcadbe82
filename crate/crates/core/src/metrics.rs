//! Anomaly rate, peak SNR, and error statistics over TDoA estimates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gcc,
    Svd,
    Wsvd,
    Cnn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Gcc, Method::Svd, Method::Wsvd, Method::Cnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gcc => "gcc",
            Method::Svd => "svd",
            Method::Wsvd => "wsvd",
            Method::Cnn => "cnn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MetricsError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdeRecord {
    pub true_tdoa: i64,
    pub estimated_tdoa: i64,
    pub peak_snr_db: f64,
    /// Samples; strictly positive.
    pub correlation_time: f64,
    pub method: Method,
}

impl TdeRecord {
    pub fn abs_error(&self) -> u64 {
        self.true_tdoa.abs_diff(self.estimated_tdoa)
    }
}

/// `|τ − τ̂| > T_c / 2`, strictly.
pub fn is_anomalous(record: &TdeRecord) -> bool {
    record.abs_error() as f64 > record.correlation_time / 2.0
}

/// Guard half-width `ceil(T_c / 2)` used around the peak.
pub fn default_guard(correlation_time: f64) -> usize {
    (correlation_time / 2.0).ceil().max(0.0) as usize
}

/// `20 log10(|peak| / off-peak RMS)`, the off-peak set being every index
/// farther than `guard` from the peak. A silent background gives `+∞`.
pub fn peak_snr(values: &[f64], peak_index: usize, guard: usize) -> Result<f64, MetricsError> {
    if peak_index >= values.len() {
        return Err(MetricsError::PeakOutOfRange {
            peak: peak_index,
            len: values.len(),
        });
    }
    let (mut ss, mut n) = (0.0, 0usize);
    for (i, v) in values.iter().enumerate() {
        if i.abs_diff(peak_index) > guard {
            ss += v * v;
            n += 1;
        }
    }
    let peak = values[peak_index].abs();
    if n == 0 || ss == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / (ss / n as f64).sqrt()).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub anomalous_pct: f64,
    /// dB-domain mean over non-anomalous estimates.
    pub mean_peak_snr_db: Option<f64>,
    pub mae: Option<f64>,
    /// Population standard deviation of the absolute errors.
    pub sdae: Option<f64>,
    pub count_total: usize,
    pub count_anomalous: usize,
}

/// Order-independent running totals; error moments are kept as integers so
/// partial results merge exactly. The ρ sum is a float and therefore merges
/// exactly only in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    total: usize,
    anomalous: usize,
    sum_err: u128,
    sum_err_sq: u128,
    sum_rho: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, record: &TdeRecord) -> Result<(), MetricsError> {
        if !(record.correlation_time > 0.0) {
            return Err(MetricsError::InvalidCorrelationTime(record.correlation_time));
        }
        self.total += 1;
        if is_anomalous(record) {
            self.anomalous += 1;
        } else {
            let e = record.abs_error() as u128;
            self.sum_err += e;
            self.sum_err_sq += e * e;
            self.sum_rho += record.peak_snr_db;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.total += other.total;
        self.anomalous += other.anomalous;
        self.sum_err += other.sum_err;
        self.sum_err_sq += other.sum_err_sq;
        self.sum_rho += other.sum_rho;
    }

    pub fn summary(&self) -> Result<MetricsSummary, MetricsError> {
        if self.total == 0 {
            return Err(MetricsError::Empty);
        }
        let good = self.total - self.anomalous;
        let (rho, mae, sdae) = if good == 0 {
            (None, None, None)
        } else {
            let n = good as u128;
            // n² var = n Σe² − (Σe)², exact in integers
            let scaled_var = n * self.sum_err_sq - self.sum_err * self.sum_err;
            (
                Some(self.sum_rho / good as f64),
                Some(self.sum_err as f64 / good as f64),
                Some((scaled_var as f64).sqrt() / good as f64),
            )
        };
        Ok(MetricsSummary {
            anomalous_pct: 100.0 * self.anomalous as f64 / self.total as f64,
            mean_peak_snr_db: rho,
            mae,
            sdae,
            count_total: self.total,
            count_anomalous: self.anomalous,
        })
    }
}

pub fn summarize<'a>(records: impl IntoIterator<Item = &'a TdeRecord>) -> Result<MetricsSummary, MetricsError> {
    let mut acc = MetricsAccumulator::default();
    for r in records {
        acc.push(r)?;
    }
    acc.summary()
}
