//! Results CSV and static SVG line charts.

use std::fmt::Write as _;

use fsgcc_core::metrics::Method;

use crate::evaluate::CellReport;
use crate::CliError;

pub const CSV_HEADER: &str = "method,t60,snr,P_pct,rho_db,mae,sdae,n";

/// Six significant digits, shortest decimal form; `inf`, `-inf`, `nan` for
/// non-finite values.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    let s = format!("{rounded}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), sig6)
}

pub fn to_csv(cells: &[CellReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cells {
        let s = &c.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.method,
            sig6(c.t60),
            c.snr_db.map_or_else(|| "inf".into(), sig6),
            sig6(s.anomalous_pct),
            opt(s.mean_peak_snr_db),
            opt(s.mae),
            opt(s.sdae),
            s.count_total
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub method: Method,
    pub t60: f64,
    pub snr: f64,
    pub p_pct: f64,
    pub rho_db: f64,
    pub mae: f64,
    pub sdae: f64,
    pub n: usize,
}

/// Parses a results table; errors name the 1-based line.
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, CliError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(CliError::Runtime(format!("row 1: expected header \"{CSV_HEADER}\""))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let bad = |what: &str| CliError::Runtime(format!("row {row}: {what}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(&format!("expected 8 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad(&format!("field {} is not a number", k + 1)));
        rows.push(CsvRow {
            method: f[0].parse().map_err(|_| bad(&format!("unknown method '{}'", f[0])))?,
            t60: num(1)?,
            snr: num(2)?,
            p_pct: num(3)?,
            rho_db: num(4)?,
            mae: num(5)?,
            sdae: num(6)?,
            n: f[7].trim().parse().map_err(|_| bad("field 8 is not a count"))?,
        });
    }
    Ok(rows)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Axis range padded by 5 %, widened when flat.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// A plain 640×400 line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 70.0, 150.0, 40.0, 50.0);
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, (ml + w - mr) / 2.0);
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{ml}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{b}"/></g>"#,
        b = h - mb,
        r = w - mr
    );
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, px(xv), h - mb + 16.0, sig6(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, ml - 6.0, py(yv) + 4.0, sig6(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, (ml + w - mr) / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#, (mt + h - mb) / 2.0, (mt + h - mb) / 2.0);
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, ser.label, pts.join(" "));
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("point pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = mt + 18.0 * k as f64 + 10.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - mr + 36.0, ly + 4.0, ser.label);
    }
    s.push_str("</svg>\n");
    s
}

/// The four metric panels as `(file name, svg)`; empty when there are no rows.
pub fn charts(rows: &[CsvRow]) -> Vec<(String, String)> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mut keys: Vec<(Method, u64)> = Vec::new();
    for r in rows {
        let k = (r.method, r.snr.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let multi_snr = keys.iter().any(|k| k.1 != keys[0].1);
    let panels: [(&str, &str, &str, fn(&CsvRow) -> f64); 4] = [
        ("anomalous_pct.svg", "Anomalous estimates", "P (%)", |r| r.p_pct),
        ("peak_snr.svg", "GCC peak SNR", "rho (dB)", |r| r.rho_db),
        ("mae.svg", "Mean absolute error", "MAE (samples)", |r| r.mae),
        ("sdae.svg", "Standard deviation of absolute error", "SDAE (samples)", |r| r.sdae),
    ];
    panels
        .iter()
        .map(|(file, title, y, get)| {
            let series: Vec<Series> = keys
                .iter()
                .map(|&(m, snr)| {
                    let mut points: Vec<(f64, f64)> = rows
                        .iter()
                        .filter(|r| r.method == m && r.snr.to_bits() == snr)
                        .map(|r| (r.t60, get(r)))
                        .collect();
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let label = if multi_snr {
                        format!("{m} @ {} dB", sig6(f64::from_bits(snr)))
                    } else {
                        m.to_string().to_uppercase()
                    };
                    Series { label, points }
                })
                .collect();
            (file.to_string(), line_chart(title, "T60 (s)", y, &series))
        })
        .collect()
}
