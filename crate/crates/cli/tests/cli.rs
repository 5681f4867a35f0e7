//! End-to-end runs of the `tempscale` binary.

use std::path::Path;
use std::process::{Command, Output};

fn tempscale(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempscale"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TEMPSCALE_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small but complete config: one temperature, tiny blobs, short training.
const SMALL: &str = r#"{
  "version": 1,
  "master_seed": 7,
  "temperatures": [30],
  "dataset": {"kind": "blobs", "classes": 3, "shape": [8], "per_class": 40,
              "test_per_class": 20, "separation": 0.6, "noise": 0.1, "seed": 0},
  "train": {"epochs": 3, "batch_size": 16},
  "output_dir": "out"
}"#;

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tempscale(&["grad-check", "--instances", "20"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"version": 1, "learning_rate": 0.1}"#).unwrap();
    let o = tempscale(&["sweep", "--config", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn invalid_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"version": 1, "temperatures": [-1]}"#).unwrap();
    assert_eq!(
        tempscale(&["sweep", "--config", "c.json"], dir.path()).status.code(),
        Some(2)
    );
    std::fs::write(dir.path().join("v.json"), r#"{"version": 99}"#).unwrap();
    assert_eq!(
        tempscale(&["sweep", "--config", "v.json"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        tempscale(&["sweep", "--config", "nope.json"], dir.path()).status.code(),
        Some(4)
    );
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let o = tempscale(
        &[
            "attack-eval",
            "--model",
            "missing.json",
            "--config",
            "c.json",
            "--out",
            "a.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn one_temperature_sweep_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let o = tempscale(&["sweep", "--config", "c.json", "--out", "a"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = std::fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 2, "{results}");
    assert!(results.lines().nth(1).unwrap().starts_with("standard,30,0,"));

    let o = tempscale(
        &["--sequential", "sweep", "--config", "c.json", "--out", "b"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "results.csv",
        "table.csv",
        "manifest.json",
        "standard/tau_30_r0/geometry.csv",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn single_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let o = tempscale(&["train", "--config", "c.json", "--tau", "1", "--out", "m"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let model = dir.path().join("m/model.json");
    assert!(model.exists());
    let m = model.to_str().unwrap();
    let runs: [&[&str]; 3] = [
        &[
            "attack-eval",
            "--model",
            m,
            "--config",
            "c.json",
            "--target",
            "error-prone",
            "--out",
            "att.csv",
        ],
        &[
            "corrupt-eval",
            "--model",
            m,
            "--config",
            "c.json",
            "--severity",
            "2",
            "--out",
            "cor.csv",
        ],
        &["analyze", "--model", m, "--config", "c.json", "--out", "an"],
    ];
    for args in runs {
        let o = tempscale(args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    let att = std::fs::read_to_string(dir.path().join("att.csv")).unwrap();
    assert_eq!(att.lines().count(), 61);
    assert!(dir.path().join("an/geometry.csv").exists());
}
