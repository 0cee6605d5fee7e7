//! End-to-end checks of the command-line interface: artifact layout,
//! rerun determinism across subcommands, and the exit-code contract
//! (0 success, 2 config/format errors, 3 numerical failures).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flrsp"))
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "flrsp-cli-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, learning_rate: f64) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "model": {{"kind": "mlp", "input_dim": 16, "hidden_dims": [6], "num_classes": 2, "input_bias": true}},
  "dataset": {{"kind": "synthetic", "classes": 2, "count": 24, "height": 4, "width": 4, "noise": 0.05}},
  "aggregation": "fed_sgd",
  "defense": {{"kind": "flrsp", "r": 0.5}},
  "clients": 2,
  "epochs": 2,
  "batch_size": 4,
  "learning_rate": {learning_rate},
  "attack_images": 2,
  "plots": true
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn flrsp binary")
}

fn assert_code(out: &Output, want: i32, context: &str) {
    let got = out.status.code().unwrap_or(-1);
    assert_eq!(
        got,
        want,
        "{context}: exit {got}, want {want}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_attack_analyze_plot_pipeline() {
    let dir = tempdir("pipeline");
    let cfg = write_config(&dir, 0.1);
    let run_dir = dir.join("run");
    let run_str = run_dir.to_str().unwrap();

    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", run_str]);
    assert_code(&out, 0, "train");
    assert!(run_dir.join("metrics.csv").exists());
    assert!(run_dir.join("config.json").exists());
    assert!(run_dir.join("accuracy.svg").exists());
    assert!(
        !run_dir.join("attacks.json").exists(),
        "train without attack must not write attack artifacts"
    );

    let out = run(&[
        "attack",
        "--run",
        run_str,
        "--attack",
        "opt",
        "--images",
        "2",
        "--iterations",
        "40",
    ]);
    assert_code(&out, 0, "attack");
    assert!(run_dir.join("attacks.json").exists());
    assert!(run_dir.join("summary.json").exists());
    assert!(run_dir.join("recon_01.pgm").exists());
    assert!(run_dir.join("fixtures/global.bin").exists());
    assert!(run_dir.join("fixtures/update_00.bin").exists());
    assert!(run_dir.join("fixtures/meta_00.json").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("median ssim"), "attack output: {stdout}");

    let out = run(&["analyze", "--run", run_str, "--trials", "500"]);
    assert_code(&out, 0, "analyze");
    assert!(run_dir.join("update_ratio.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("G(f) flrsp"), "analyze output: {stdout}");

    // Plot regeneration from the CSVs is byte-stable.
    let before = fs::read(run_dir.join("ssim_box.svg")).unwrap();
    let out = run(&["plot", "--run", run_str]);
    assert_code(&out, 0, "plot");
    let after = fs::read(run_dir.join("ssim_box.svg")).unwrap();
    assert_eq!(before, after, "plot must regenerate identical SVGs");

    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn train_is_deterministic_across_directories() {
    let dir = tempdir("determinism");
    let cfg = write_config(&dir, 0.1);
    for name in ["a", "b"] {
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join(name).to_str().unwrap(),
        ]);
        assert_code(&out, 0, "train");
    }
    let a = fs::read(dir.join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.join("b/metrics.csv")).unwrap();
    assert_eq!(a, b, "metrics.csv differs across identical runs");

    // A different root seed must change the trajectory.
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("c").to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_code(&out, 0, "train with seed override");
    let c = fs::read(dir.join("c/metrics.csv")).unwrap();
    assert_ne!(a, c, "seed override had no effect");

    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn config_errors_exit_2() {
    let dir = tempdir("config-errors");

    let out = run(&[
        "train",
        "--config",
        "/nonexistent/config.json",
        "--out",
        "/tmp/x",
    ]);
    assert_code(&out, 2, "missing config file");

    let bad = dir.join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = run(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        "/tmp/x",
    ]);
    assert_code(&out, 2, "malformed json");

    // Valid JSON, invalid experiment: april against an MLP.
    let invalid = dir.join("invalid.json");
    fs::write(
        &invalid,
        r#"{
  "model": {"kind": "mlp", "input_dim": 16, "hidden_dims": [6], "num_classes": 2, "input_bias": true},
  "dataset": {"kind": "synthetic", "classes": 2, "count": 24, "height": 4, "width": 4},
  "aggregation": "fed_sgd",
  "attack": {"kind": "april"},
  "clients": 2,
  "epochs": 2,
  "batch_size": 4,
  "learning_rate": 0.1
}"#,
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        invalid.to_str().unwrap(),
        "--out",
        "/tmp/x",
    ]);
    assert_code(&out, 2, "april on mlp");

    // analyze with out-of-range R.
    let out = run(&["analyze", "--r", "1.5"]);
    assert_code(&out, 2, "analyze with R out of range");

    // plot on a directory with no plot data.
    let out = run(&["plot", "--run", dir.to_str().unwrap()]);
    assert_code(&out, 2, "plot without plot data");

    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn numerical_failures_exit_3() {
    let dir = tempdir("numerical");
    // An absurd learning rate makes the loss diverge to non-finite values
    // within two rounds.
    let cfg = write_config(&dir, 1e12);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert_code(&out, 3, "divergent training");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("round"),
        "numerical error should name the round: {stderr}"
    );
    fs::remove_dir_all(dir).unwrap();
}
