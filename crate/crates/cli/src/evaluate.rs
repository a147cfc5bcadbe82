//! Per-frame estimation with every method, and aggregation into sweep cells.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fsgcc_core::dataset::{frame_spectra, load_signals, DatasetManifest, ExampleRecord};
use fsgcc_core::dsp::{frame_starts, WindowKind};
use fsgcc_core::fsgcc::{fs_gcc, FsGccConfig, RealMatrix};
use fsgcc_core::gcc::{argmax_lag, gcc_from_phat, phat_spectrum};
use fsgcc_core::lowrank::{svd_denoise_from, svd_fsgcc, wsvd_denoise_from};
use fsgcc_core::metrics::{default_guard, peak_snr, MetricsAccumulator, MetricsSummary, Method, TdeRecord};
use fsgcc_core::unet::{normalize_by_max, Mode, Tensor, UNetModel};

use crate::CliError;

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: Method,
    pub t60: f64,
    pub snr_db: Option<f64>,
    pub summary: MetricsSummary,
}

/// Settings shared by every frame of one evaluation run.
pub struct FrameContext<'a> {
    pub fsgcc: &'a FsGccConfig,
    pub window: Vec<f64>,
    pub crop_width: usize,
    pub methods: &'a [Method],
}

/// Lags `[-w/2, w/2)` of a centred sequence.
fn crop_centered(values: &[f64], width: usize) -> &[f64] {
    let c = values.len() / 2;
    &values[c - width / 2..c + width / 2]
}

/// ρ over the evaluation window shared by all methods: the `crop_width`
/// lags around zero that the network sees.
fn windowed_peak_snr(centered: &[f64], estimate: i64, width: usize, tc: f64) -> f64 {
    let win = crop_centered(centered, width);
    let idx = (width as i64 / 2 + estimate) as usize;
    peak_snr(win, idx, default_guard(tc)).unwrap_or(f64::NAN)
}

fn record(method: Method, truth: i64, estimate: Option<(i64, f64)>, tc: f64) -> TdeRecord {
    // an estimator with no answer counts as anomalous
    let (est, rho) = estimate.unwrap_or((truth.saturating_add(i64::MAX / 2), f64::NAN));
    TdeRecord {
        true_tdoa: truth,
        estimated_tdoa: est,
        peak_snr_db: rho,
        correlation_time: tc,
        method,
    }
}

fn band_average_estimate(m: &RealMatrix, max_lag: usize, width: usize, tc: f64) -> Option<(i64, f64)> {
    let avg = m.band_average();
    let tau = argmax_lag(&avg, max_lag).ok()?;
    Some((tau, windowed_peak_snr(&avg, tau, width, tc)))
}

/// Estimates of every requested method on the frame starting at `start`.
pub fn estimate_frame(
    ctx: &FrameContext,
    model: Option<&mut UNetModel>,
    x1: &[f64],
    x2: &[f64],
    start: usize,
    scene: &ExampleRecord,
) -> Result<Vec<TdeRecord>, CliError> {
    let (s1, s2) = frame_spectra(x1, x2, start, &ctx.window).map_err(CliError::runtime)?;
    let tc = scene.correlation_time;
    let truth = scene.true_tdoa;
    let max_lag = scene.max_lag;
    let w = ctx.crop_width;
    let wants = |m: Method| ctx.methods.contains(&m);
    let mut out = Vec::with_capacity(ctx.methods.len());
    if wants(Method::Gcc) {
        let phat = phat_spectrum(&s1, &s2).map_err(CliError::runtime)?;
        let g = gcc_from_phat(&phat).map_err(CliError::runtime)?;
        let est = if g.is_degenerate() {
            None
        } else {
            argmax_lag(g.values(), max_lag)
                .ok()
                .map(|tau| (tau, windowed_peak_snr(g.values(), tau, w, tc)))
        };
        out.push(record(Method::Gcc, truth, est, tc));
    }
    if !(wants(Method::Svd) || wants(Method::Wsvd) || wants(Method::Cnn)) {
        return Ok(out);
    }
    let fs = fs_gcc(&s1, &s2, ctx.fsgcc).map_err(CliError::runtime)?;
    if wants(Method::Svd) || wants(Method::Wsvd) {
        let f = svd_fsgcc(&fs);
        if wants(Method::Svd) {
            out.push(record(Method::Svd, truth, band_average_estimate(&svd_denoise_from(&f), max_lag, w, tc), tc));
        }
        if wants(Method::Wsvd) {
            out.push(record(Method::Wsvd, truth, band_average_estimate(&wsvd_denoise_from(&f), max_lag, w, tc), tc));
        }
    }
    if wants(Method::Cnn) {
        let model = model.ok_or_else(|| CliError::Usage("the cnn method needs --model".into()))?;
        let crop = fs.magnitude().crop_columns(fs.cols() / 2, w).map_err(CliError::runtime)?;
        let mut data = crop.data.clone();
        let scale = normalize_by_max(&mut data);
        let input = Tensor::new([1, 1, crop.rows, w], data).map_err(CliError::runtime)?;
        let y = model.forward(&input).map_err(CliError::runtime)?;
        let mut values = y.into_data();
        values.iter_mut().for_each(|v| *v *= scale);
        let denoised = RealMatrix::new(crop.rows, w, values).map_err(CliError::runtime)?;
        out.push(record(Method::Cnn, truth, band_average_estimate(&denoised, max_lag, w, tc), tc));
    }
    Ok(out)
}

fn cell_key(t60: f64, snr: Option<f64>) -> (u64, u64) {
    (t60.to_bits(), snr.map_or(u64::MAX, f64::to_bits))
}

/// Runs every requested method on every frame of an evaluation set.
/// Records are produced in manifest order regardless of worker count, and
/// cells are ordered by method, then T60, then SNR.
pub fn evaluate_dataset(
    root: &Path,
    manifest: &DatasetManifest,
    methods: &[Method],
    model: Option<&UNetModel>,
) -> Result<Vec<CellReport>, CliError> {
    let cfg = &manifest.config;
    if methods.contains(&Method::Cnn) && model.is_none() {
        return Err(CliError::Usage("the cnn method needs --model".into()));
    }
    if manifest.examples.iter().any(|e| e.signals.is_none()) {
        return Err(CliError::Runtime(
            "dataset holds training crops, not signals; generate it with \"frames\": \"all\"".into(),
        ));
    }
    if let Some(m) = model {
        let [h, w] = manifest.tensor_shape;
        m.check_input(&Tensor::zeros([1, 1, h, w])).map_err(CliError::runtime)?;
    }
    let ctx = FrameContext {
        fsgcc: &cfg.fsgcc,
        window: WindowKind::Hann.samples(cfg.frame_length).map_err(CliError::runtime)?,
        crop_width: cfg.crop_width,
        methods,
    };
    let inference = model.map(|m| {
        let mut m = m.clone();
        m.set_mode(Mode::Inference);
        m
    });
    let per_scene: Vec<Vec<TdeRecord>> = manifest
        .examples
        .par_iter()
        .map_init(
            || inference.clone(),
            |model, scene| {
                let (x1, x2) = load_signals(root, scene).map_err(CliError::runtime)?;
                let mut recs = Vec::new();
                for start in frame_starts(x1.len(), cfg.frame_length, cfg.hop()) {
                    recs.extend(estimate_frame(&ctx, model.as_mut(), &x1, &x2, start, scene)?);
                }
                Ok(recs)
            },
        )
        .collect::<Result<_, CliError>>()?;

    let mut cells: Vec<(f64, Option<f64>)> = Vec::new();
    for e in &manifest.examples {
        if !cells.iter().any(|c| cell_key(c.0, c.1) == cell_key(e.t60, e.snr_db)) {
            cells.push((e.t60, e.snr_db));
        }
    }
    cells.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.unwrap_or(f64::INFINITY).total_cmp(&b.1.unwrap_or(f64::INFINITY)))
    });
    let mut ordered: Vec<Method> = methods.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut reports = Vec::new();
    for method in ordered {
        for &(t60, snr) in &cells {
            let mut acc = MetricsAccumulator::default();
            for (scene, recs) in manifest.examples.iter().zip(&per_scene) {
                if cell_key(scene.t60, scene.snr_db) != cell_key(t60, snr) {
                    continue;
                }
                for r in recs.iter().filter(|r| r.method == method) {
                    acc.push(r).map_err(CliError::runtime)?;
                }
            }
            let summary = acc.summary().map_err(CliError::runtime)?;
            reports.push(CellReport {
                method,
                t60,
                snr_db: snr,
                summary,
            });
        }
    }
    Ok(reports)
}
