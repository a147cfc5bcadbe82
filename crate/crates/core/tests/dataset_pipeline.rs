use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fsgcc_core::dataset::{generate_pairs, load_signals, read_f64s, DatasetManifest, ExperimentConfig, FrameSelection, Sweep};
use fsgcc_core::fsgcc::{band_average_tdoa, RealMatrix};

fn small_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        n_mic_pairs: 2,
        n_sources: 3,
        t60_range_s: [0.2, 0.4],
        utterance_s: 0.1,
        seed,
        ..ExperimentConfig::default()
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn training_set_is_complete_and_targets_are_ideal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(3);
    let manifest = generate_pairs(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.examples.len() + manifest.skipped.len(), 6);
    let [h, w] = manifest.tensor_shape;
    assert_eq!([h, w], [cfg.fsgcc.band_count, cfg.crop_width]);
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.examples {
        let (np, cp) = (e.noisy.as_ref().unwrap(), e.clean.as_ref().unwrap());
        assert!(seen.insert(np.clone()) && seen.insert(cp.clone()), "tensor listed twice");
        assert_eq!(read_f64s(&dir.path().join(np)).unwrap().len(), h * w);
        let clean = RealMatrix::new(h, w, read_f64s(&dir.path().join(cp)).unwrap()).unwrap();
        assert_eq!(band_average_tdoa(&clean, e.max_lag).unwrap(), e.true_tdoa, "example {}", e.id);
    }
    // every stored tensor is referenced by the manifest
    let stored = snapshot(dir.path()).keys().filter(|k| k.ends_with(".f64")).count();
    assert_eq!(stored, seen.len());
}

#[test]
fn equal_seeds_give_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_pairs(&small_config(11), a.path()).unwrap();
    generate_pairs(&small_config(11), b.path()).unwrap();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_pairs(&small_config(12), c.path()).unwrap();
    assert_ne!(snapshot(a.path()), snapshot(c.path()));
}

#[test]
fn evaluation_sets_store_signals_for_every_sweep_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        frames: FrameSelection::All,
        sweep: Some(Sweep {
            t60_s: vec![0.0, 0.3],
            snr_db: vec![None, Some(20.0)],
        }),
        ..small_config(5)
    };
    let manifest = generate_pairs(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.examples.len(), 6 * 4);
    let reloaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(reloaded.examples.len(), manifest.examples.len());
    for e in &reloaded.examples {
        let (x1, x2) = load_signals(dir.path(), e).unwrap();
        assert_eq!(x1.len(), x2.len());
        assert!(e.frame_count.unwrap() >= 1);
    }
}
