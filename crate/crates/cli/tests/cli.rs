use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chartloc::io;

const QUICK: &[&str] = &[
    "--set",
    "trajectory.waypoints=[[2,2],[38,2],[38,10]]",
    "--set",
    "trajectory.dt_s=0.5",
];

const TINY_MODEL: &[&str] = &[
    "--set",
    "epochs=2",
    "--set",
    "widths={\"conv1_channels\":2,\"conv2_channels\":2,\"fc1_units\":8,\"fc2_units\":4}",
];

fn chartloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chartloc")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["simulate", "--out", p(&out)];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    let o = chartloc(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_roundtrips_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = simulate(dir.path(), "d.cird", &[]);
    let bytes = std::fs::read(&path).unwrap();
    let file = io::read_dataset(&path).unwrap();
    assert_eq!(file.encode().unwrap(), bytes);
    assert!(file.truth.is_some() && file.displacements.is_some());
    let manifest = io::Manifest::read(&dir.path().join("d.cird.manifest.json")).unwrap();
    assert_eq!(manifest.command, "simulate");
    assert_eq!(manifest.outputs[0].sha256, io::sha256_hex(&bytes));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a.cird", &["--set", "seed=7", "--set", "r_los=0.5"]);
    let b = simulate(dir.path(), "b.cird", &["--set", "seed=7", "--set", "r_los=0.5"]);
    let c = simulate(dir.path(), "c.cird", &["--set", "seed=8", "--set", "r_los=0.5"]);
    assert_eq!(io::sha256_file(&a).unwrap(), io::sha256_file(&b).unwrap());
    assert_ne!(io::sha256_file(&a).unwrap(), io::sha256_file(&c).unwrap());
}

#[test]
fn bad_r_los_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.cird");
    let o = chartloc(&["simulate", "--out", p(&out), "--set", "r_los=1.5"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("r_los"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.cird");
    let o = chartloc(&["simulate", "--out", p(&out), "--set", "r_loss=0.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&chartloc(&["simulate"])), 1);
    assert_eq!(code(&chartloc(&["frobnicate"])), 1);
    assert_eq!(code(&chartloc(&["--help"])), 0);
}

#[test]
fn test_mode_preprocessing_needs_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.cird", &[]);
    let frames = dir.path().join("f.ccpf");
    let o = chartloc(&["preprocess", "--dataset", p(&data), "--out", p(&frames), "--mode", "test"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    let o = chartloc(&[
        "preprocess", "--dataset", p(&data), "--out", p(&frames), "--mode", "test", "--alpha-norm", "2.5",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(io::read_frames(&frames).unwrap().alpha_norm, 2.5);
}

#[test]
fn predict_without_trained_model_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.cird", &[]);
    let frames = dir.path().join("f.ccpf");
    assert_eq!(code(&chartloc(&["preprocess", "--dataset", p(&data), "--out", p(&frames)])), 0);
    let model = dir.path().join("missing.model");
    let out = dir.path().join("est.csv");
    let o = chartloc(&["predict", "--model", p(&model), "--frames", p(&frames), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn evaluate_rejects_mismatched_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let est = dir.path().join("est.csv");
    let truth = dir.path().join("truth.csv");
    std::fs::write(&est, "t,x_m,y_m,gap\n0.0,1.0,1.0,0\n1.0,2.0,1.0,0\n2.0,,,1\n").unwrap();
    std::fs::write(&truth, "t,x_m,y_m,gap\n0.0,1.0,1.0,0\n1.0,2.0,1.0,0\n").unwrap();
    let out = dir.path().join("m.json");
    let o = chartloc(&["evaluate", "--estimate", p(&est), "--truth", p(&truth), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

#[test]
fn full_chain_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.cird", &["--set", "r_los=0.75"]);
    let frames = dir.path().join("f.ccpf");
    let o = chartloc(&["preprocess", "--dataset", p(&data), "--out", p(&frames), "--set", "truncation=32"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let model = dir.path().join("m.model");
    let mut args = vec!["train", "--dataset", p(&data), "--frames", p(&frames), "--out", p(&model)];
    args.extend_from_slice(TINY_MODEL);
    let o = chartloc(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("m.history.csv").exists());
    let manifest = io::Manifest::read(&dir.path().join("m.model.manifest.json")).unwrap();
    assert!(manifest.alpha_norm.is_some() && manifest.lambda.is_some() && manifest.beta == Some(2.0));

    let est = dir.path().join("cc.csv");
    let o = chartloc(&["predict", "--model", p(&model), "--frames", p(&frames), "--out", p(&est)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let pso = dir.path().join("pso.csv");
    let o = chartloc(&[
        "baseline", "--dataset", p(&data), "--frames", p(&frames), "--out", p(&pso), "--set", "pso.iterations=30",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    for (est, name) in [(&est, "cc"), (&pso, "pso")] {
        let metrics = dir.path().join(format!("{name}.json"));
        let cdf = dir.path().join(format!("{name}.cdf.csv"));
        let o = chartloc(&[
            "evaluate", "--estimate", p(est), "--dataset", p(&data), "--out", p(&metrics), "--cdf", p(&cdf),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let report: chartloc::MetricsReport = io::read_json(&metrics).unwrap();
        assert!(report.ce90_m.is_finite() && report.frames > 0);
        assert!(std::fs::read_to_string(&cdf).unwrap().starts_with("error_m,fraction"));
    }
    let pso_report: chartloc::MetricsReport = io::read_json(&dir.path().join("pso.json")).unwrap();
    assert!(pso_report.ce90_m < 10.0);
}

#[test]
fn experiment_and_rerun_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let o = chartloc(&[
        "experiment",
        "--out",
        p(&out),
        "--set",
        "simulate.trajectory.waypoints=[[2,2],[38,2]]",
        "--set",
        "simulate.trajectory.dt_s=0.5",
        "--set",
        "r_los=[0.5]",
        "--set",
        "seeds=[3]",
        "--set",
        "methods=[\"pso_masked\"]",
        "--set",
        "pso.iterations=20",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cell = out.join("cells").join("pso_masked_r0.5_l0.2_s3");
    let again = dir.path().join("again");
    let o = chartloc(&["rerun", "--manifest", p(&cell.join("manifest.json")), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(cell.join("metrics.json")).unwrap(),
        std::fs::read(again.join("metrics.json")).unwrap()
    );
    assert!(out.join("table.csv").exists() && out.join("manifest.json").exists());
}

#[test]
fn config_prints_defaults() {
    let o = chartloc(&["config", "experiment"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["r_los"], serde_json::json!([1.0, 0.75, 0.5, 0.25]));
}
