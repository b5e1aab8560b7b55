//! The `dann` binary end to end on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "dataset": {
    "renderer": {"image_size": 16},
    "domains": [
      {"name": "source", "transform": {"kind": "identity"}, "per_class": 12},
      {"name": "t_contrast", "transform": {"kind": "contrast_reduce", "factor": 0.3}, "per_class": 8},
      {"name": "t_lowres", "transform": {"kind": "downsample", "scale": 2}, "per_class": 8}
    ]
  },
  "target_test_per_class": 4,
  "shots": 3,
  "backbone": {"input_size": 16, "stage_channels": [4, 8], "embedding_dim": 8, "discriminator_hidden": 8},
  "train": {"epochs": 2},
  "explain": {"gradcam_samples": 2, "tsne": {"iterations": 50, "perplexity": 5.0}}
}"#;

fn dann(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dann"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dann(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.json", "gen-data"]);
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn default_gen_data_writes_four_domains_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--out", "a", "--seed", "3"]);
    ok(dir.path(), &["gen-data", "--out", "b", "--seed", "3"]);
    let a = dir.path().join("a");
    let mut domains: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    domains.sort();
    assert_eq!(domains, ["source", "t_contrast", "t_growth", "t_lowres"]);

    let manifest = read_json(&a.join("manifest.json"));
    for entry in manifest["entries"].as_array().unwrap() {
        let dir = a.join(entry["domain"].as_str().unwrap()).join(entry["species"].as_str().unwrap());
        assert_eq!(fs::read_dir(dir).unwrap().count() as u64, entry["count"].as_u64().unwrap());
    }
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(dir.path().join("b/manifest.json")).unwrap()
    );
}

#[test]
fn train_eval_explain_round_trip() {
    let dir = tiny_workspace();
    let root = dir.path();
    ok(root, &["--config", "tiny.json", "--out", "run", "train", "--mode", "mdann", "--targets", "t_contrast,t_lowres"]);
    let run = root.join("run");
    for f in ["config.json", "metrics.csv", "checkpoint.adsh"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echoed = read_json(&run.join("config.json"));
    assert_eq!(echoed["backbone"]["num_domains"], 3);
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);

    // eval and explain read the echoed config from the run directory.
    let table = ok(root, &["--out", "run", "eval"]);
    assert!(table.contains("t_lowres"), "{table}");
    let csv = fs::read_to_string(run.join("eval/accuracy.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let cm = read_json(&run.join(format!("eval/confusion_{}.json", cols[0])));
        let counts: Vec<Vec<u64>> = serde_json::from_value(cm["counts"].clone()).unwrap();
        let total: u64 = counts.iter().flatten().sum();
        let trace: u64 = (0..counts.len()).map(|i| counts[i][i]).sum();
        assert_eq!(total.to_string(), cols[1]);
        let acc: f64 = cols[2].parse().unwrap();
        assert!((acc - trace as f64 / total as f64).abs() < 1e-8);
    }

    ok(root, &["--out", "run", "explain", "--kind", "tsne"]);
    let first = fs::read(run.join("explain/tsne.csv")).unwrap();
    // 6 classes x (1 source test + 4 + 4 target test).
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 1 + 6 * 9);
    ok(root, &["--out", "run", "explain", "--kind", "tsne"]);
    assert_eq!(first, fs::read(run.join("explain/tsne.csv")).unwrap());

    ok(root, &["--out", "run", "explain", "--kind", "gradcam"]);
    let names: Vec<String> = fs::read_dir(run.join("explain/gradcam"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 6);
    for png in names.iter().filter(|n| n.ends_with(".png")) {
        assert!(names.contains(&png.replace(".png", ".json")));
    }

    let probe = ok(root, &["--out", "run", "explain", "--kind", "probe"]);
    assert!(probe.contains("domain probe accuracy"), "{probe}");
    let report = read_json(&run.join("explain/probe.json"));
    assert!((report["chance"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn source_only_needs_no_target_data_and_flags_win() {
    let dir = tiny_workspace();
    let root = dir.path();
    fs::remove_dir_all(root.join("data/t_contrast")).unwrap();
    ok(root, &["--config", "tiny.json", "--out", "so", "--set", "train.epochs=3", "train", "--mode", "source_only", "--epochs", "1"]);
    assert_eq!(fs::read_to_string(root.join("so/metrics.csv")).unwrap().lines().count(), 2);
    // The discriminator was never trained, but the class head works.
    ok(root, &["--out", "so", "eval", "--domains", "source"]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tiny_workspace();
    let root = dir.path();

    let out = dann(root, &["--config", "tiny.json", "--set", "train.epoch=3", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epoch"));

    let out = dann(root, &["--config", "tiny.json", "train", "--target", "t_missing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t_missing"));

    // A checkpoint trained with another backbone is refused with both hashes.
    ok(root, &["--config", "tiny.json", "--out", "run", "train", "--epochs", "1"]);
    let out = dann(
        root,
        &["--config", "tiny.json", "--set", "backbone.embedding_dim=12", "--out", "run", "eval"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.matches("hash").count(), 2, "{err}");
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tiny_workspace();
    let root = dir.path();
    fs::create_dir(root.join("run")).unwrap();
    fs::write(root.join("run/checkpoint.adsh"), b"not a checkpoint").unwrap();
    let out = dann(root, &["--config", "tiny.json", "--out", "run", "eval"]);
    assert_eq!(out.status.code(), Some(1));
}
