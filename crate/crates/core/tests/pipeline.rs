use std::fs;
use std::path::Path;

use deepfmea::pipeline::{run_pipeline, RunConfig, Stage};
use deepfmea::sim::{write_dataset, SimConfig};

fn setup(dir: &Path, cycles: usize) -> RunConfig {
    let data = dir.join("data");
    write_dataset(&data, &SimConfig { cycles, ..SimConfig::default() }).unwrap();
    fs::write(dir.join("model.toml"), deepfmea::HYDRAULIC_SPEC).unwrap();
    fs::write(dir.join("costs.toml"), deepfmea::HYDRAULIC_COSTS).unwrap();
    let mut cfg = RunConfig::new(data, dir.join("model.toml"), dir.join("costs.toml"), dir.join("report"));
    cfg.seed = 11;
    cfg
}

#[test]
fn full_run_writes_manifest_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 160);
    let t = std::time::Instant::now();
    let summary = run_pipeline(&cfg).unwrap();
    eprintln!("run took {:?}, auprc {}", t.elapsed(), summary.manifest.auprc);
    for f in ["pr_curve.csv", "delta_qcpn_curve.csv", "scenario_summary.csv", "detections.csv", "attributions.csv"] {
        assert!(summary.manifest.files.contains_key(f), "{f}");
        assert!(cfg.out_dir.join(f).exists());
    }
    assert!(cfg.out_dir.join("manifest.json").exists());
    assert!(!dir.path().join(".report.partial").exists());
}

#[test]
fn missing_cost_file_fails_at_evaluate_and_leaves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 60);
    cfg.costs = dir.path().join("nope.toml");
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Evaluate);
    assert!(!cfg.out_dir.exists());
    assert!(!dir.path().join(".report.partial").exists());
}
