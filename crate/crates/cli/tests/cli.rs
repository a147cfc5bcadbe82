use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fsgcc_cli::report::{charts, parse_csv, CSV_HEADER};

fn fsgcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsgcc")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const TINY: &str = r#"{"experiment": {"n_mic_pairs": 2, "n_sources": 2, "utterance_s": 0.1, "frames": "all",
    "sweep": {"t60_s": [0.0, 0.3], "snr_db": [null]}, "seed": 4}}"#;

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fsgcc(&["simulate", "--config", p(&dir.path().join("nope.json")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"experiment": {"n_mic_pairz": 3}}"#);
    let o = fsgcc(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_mic_pairz"), "{}", stderr(&o));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let o = fsgcc(&["evaluate", "somewhere", "--methods", "gcc,music", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("music") && err.contains("gcc, svd, wsvd or cnn"), "{err}");
}

#[test]
fn cnn_without_model_is_a_usage_error() {
    let o = fsgcc(&["evaluate", "somewhere", "--methods", "cnn", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_fsgcc"))
        .args(["report", "missing.csv", "--out", "x"])
        .env("FSGCC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_then_evaluate_gcc_without_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    let o = fsgcc(&["simulate", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("simulated 8 examples"), "{stdout}");

    let csv = dir.path().join("results.csv");
    let o = fsgcc(&["evaluate", p(&data), "--methods", "gcc,svd", "--out", p(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = parse_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    // methods × T60 grid, anechoic cells exact
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r.t60 == 0.0) {
        assert_eq!(r.p_pct, 0.0, "{r:?}");
        assert!(r.snr.is_infinite());
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(csv.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 4);
    assert_eq!(report["manifest_sha256"].as_str().unwrap().len(), 64);

    // the same seed reproduces the manifest byte for byte
    let again = dir.path().join("again");
    assert_eq!(fsgcc(&["simulate", "--config", p(&cfg), "--out", p(&again)]).status.code(), Some(0));
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), fs::read(again.join("manifest.json")).unwrap());
}

#[test]
fn training_on_an_evaluation_set_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    assert_eq!(fsgcc(&["simulate", "--config", p(&cfg), "--out", p(&data)]).status.code(), Some(0));
    let o = fsgcc(&["train", p(&data), "--out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

const FOUR_METHODS: &str = "method,t60,snr,P_pct,rho_db,mae,sdae,n
gcc,0.2,20,10,12.5,1.2,0.8,600
gcc,0.5,20,30,10.1,2,1.1,600
svd,0.2,20,9,9,1.5,1,600
svd,0.5,20,28,8,2.5,1.2,600
wsvd,0.2,20,8,9.5,1.4,1,600
wsvd,0.5,20,27,8.5,2.4,1.2,600
cnn,0.2,20,5,14,1.1,0.7,600
cnn,0.5,20,20,13,1.9,1,600
";

#[test]
fn report_writes_four_charts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, FOUR_METHODS).unwrap();
    let out = dir.path().join("charts");
    let o = fsgcc(&["report", p(&csv), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["anomalous_pct.svg", "mae.svg", "peak_snr.svg", "sdae.svg"]);
    let svg = fs::read_to_string(out.join("anomalous_pct.svg")).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 4);
}

#[test]
fn malformed_csv_reports_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, format!("{CSV_HEADER}\ngcc,0.2,20,10,12.5,1.2,0.8,600\ngcc,0.5,20,oops,10,2,1,600\n")).unwrap();
    let o = fsgcc(&["report", p(&csv), "--out", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn empty_csv_warns_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, format!("{CSV_HEADER}\n")).unwrap();
    let out = dir.path().join("c");
    let o = fsgcc(&["report", p(&csv), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
    assert!(!out.exists());
}

/// Plot coordinates of every data point lie inside the plotting frame, and
/// the extreme values map onto the padded axis ends.
#[test]
fn chart_axes_cover_the_data() {
    let rows = parse_csv(FOUR_METHODS).unwrap();
    let (_, svg) = charts(&rows).into_iter().find(|(n, _)| n == "peak_snr.svg").unwrap();
    let coords: Vec<(f64, f64)> = svg
        .lines()
        .filter(|l| l.starts_with("<circle"))
        .map(|l| {
            let attr = |name: &str| -> f64 {
                let s = &l[l.find(&format!("{name}=\"")).unwrap() + name.len() + 2..];
                s[..s.find('"').unwrap()].parse().unwrap()
            };
            (attr("cx"), attr("cy"))
        })
        .collect();
    assert_eq!(coords.len(), rows.len());
    let (left, right, top, bottom) = (70.0, 490.0, 40.0, 350.0);
    for (x, y) in &coords {
        assert!((left..=right).contains(x) && (top..=bottom).contains(y), "({x}, {y}) outside the frame");
    }
    // the highest ρ sits 5 % below the top edge, the lowest 5 % above the bottom
    let ys: Vec<f64> = coords.iter().map(|c| c.1).collect();
    let (ymin, ymax) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
    let span = bottom - top;
    assert!((ymin - (top + span * 0.05 / 1.1)).abs() < 0.02, "{ymin}");
    assert!((ymax - (bottom - span * 0.05 / 1.1)).abs() < 0.02, "{ymax}");
}

#[test]
fn help_exits_zero() {
    assert_eq!(fsgcc(&["--help"]).status.code(), Some(0));
}
