use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmsr_core::eval::MetricsReport;

fn mmsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmsr")).args(args).output().unwrap()
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.example.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    for args in [&["--help"][..], &["evaluate", "--help"], &["train", "--help"], &["--version"]] {
        let out = mmsr(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
    let text = String::from_utf8(mmsr(&["evaluate", "--help"]).stdout).unwrap();
    assert!(text.contains("--sr") && text.contains("--out"));
}

#[test]
fn usage_errors_exit_one() {
    let out = mmsr(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(mmsr(&[]).status.code(), Some(1));
    assert_eq!(mmsr(&["train", "--out", "x"]).status.code(), Some(1));
    assert_eq!(mmsr(&["train", "--dataset", "d", "--out", "x", "--variant", "gan"]).status.code(), Some(1));
}

#[test]
fn invalid_config_exits_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"train\": { \"epochs\": 2, } ").unwrap();
    let out = mmsr(&["make-synthetic", "--config", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));

    std::fs::write(&bad, "{ \"trian\": {} }").unwrap();
    let out = mmsr(&["make-synthetic", "--config", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = mmsr(&["evaluate", "--sr", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = mmsr(&["extract-patches", "--dataset", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn example_config_is_complete_and_valid() {
    let text = std::fs::read_to_string(example_config()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["synthetic", "patches_per_case", "train", "tile_size", "overlap"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let train: mmsr_core::train::TrainConfig = serde_json::from_value(v["train"].clone()).unwrap();
    train.validate().unwrap();
    assert_eq!(train.epochs, 2);
}

fn tiny_pipeline(root: &Path) -> MetricsReport {
    let config = root.join("config.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(example_config()).unwrap()).unwrap();
    v["patches_per_case"] = 2.into();
    v["train"]["epochs"] = 1.into();
    v["train"]["checkpoint_every"] = 1.into();
    std::fs::write(&config, v.to_string()).unwrap();
    let c = s(&config);
    let (data, patches, run, sr, eval) =
        (root.join("data"), root.join("patches"), root.join("run"), root.join("sr"), root.join("eval"));
    let (ckpt, montage) = (run.join("model.ckpt"), root.join("montage"));
    let steps: Vec<Vec<&str>> = vec![
        vec!["make-synthetic", "--config", c, "--seed", "7", "--out", s(&data)],
        vec!["extract-patches", "--config", c, "--dataset", s(&data), "--out", s(&patches)],
        vec!["train", "--config", c, "--dataset", s(&data), "--patches", s(&patches), "--out", s(&run)],
        vec!["super-resolve", "--config", c, "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&sr)],
        vec!["evaluate", "--config", c, "--sr", s(&sr), "--out", s(&eval)],
        vec!["montage", "--sr", s(&sr), "--out", s(&montage), "--slice", "1"],
    ];
    for args in steps {
        let out = mmsr(&args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(run.join("losses.csv").exists());
    assert!(run.join("ckpt-epoch-001.ckpt").exists());
    assert!(sr.join("clinical-000-sr.raw").exists());
    assert!(root.join("montage/clinical-001-montage.png").exists());
    MetricsReport::read(&eval.join("metrics.json")).unwrap()
}

#[test]
fn tiny_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = tiny_pipeline(a.path());
    let rb = tiny_pipeline(b.path());
    assert_eq!(ra, rb);
    assert_eq!(ra.per_volume.len(), 2);
    assert!(ra.oracle.as_ref().is_some_and(|o| o.len() == 2));
    assert!(ra.per_volume.values().all(|m| m.consistency_mse.is_finite()));
    assert_ne!(ra.settings.training_ssim, ra.settings.reporting_ssim);
}
