//! End-to-end tests of the `cs-ssim` binary: every command is exercised
//! through `std::process::Command` against fixture data written in the
//! CIFAR-10 binary container format.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;

use cs_ssim::network::{Activation, Layer, NetworkParams};
use cs_ssim::optim::EarlyStop;
use cs_ssim::trainer::{load_checkpoint, load_matrix, save_checkpoint, Checkpoint};

const BIN: &str = env!("CARGO_BIN_EXE_cs-ssim");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CS_SSIM_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout_value(output: &Output, key: &str) -> Option<f64> {
    String::from_utf8_lossy(&output.stdout)
        .lines()
        .find_map(|line| line.strip_prefix(&format!("{key} ")).map(str::to_string))
        .and_then(|v| v.parse().ok())
}

fn identity_checkpoint(path: &Path) {
    let params = NetworkParams {
        layers: vec![Layer {
            weights: Array2::eye(1024),
            bias: None,
            activation: Activation::Linear,
        }],
    };
    let checkpoint = Checkpoint {
        version: cs_ssim::trainer::CHECKPOINT_VERSION,
        params,
        adam: None,
        early_stop: EarlyStop::new(50),
        epoch: 0,
        config: vec![("window".into(), "8".into())],
    };
    save_checkpoint(&checkpoint, path).unwrap();
}

#[test]
fn train_writes_checkpoint_log_and_scores() {
    let data = tempfile::tempdir().unwrap();
    common::write_synthetic_cifar(data.path(), 40, 6, 1);
    let out = tempfile::tempdir().unwrap();

    let output = run(&[
        "train",
        "--data-dir",
        data.path().to_str().unwrap(),
        "--rate",
        "0.0625",
        "--width-factor",
        "1",
        "--depth",
        "1",
        "--loss",
        "ssim",
        "--weighting",
        "log",
        "--batch-size",
        "16",
        "--max-epochs",
        "2",
        "--val-fraction",
        "0.1",
        "--seed",
        "3",
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );

    let ckpt_path = out.path().join("checkpoint.txt");
    assert!(ckpt_path.is_file());
    let log_text = std::fs::read_to_string(out.path().join("train.log")).unwrap();
    assert_eq!(log_text.lines().count(), 2);
    for line in log_text.lines() {
        assert!(line.starts_with("epoch "), "log line: {line}");
        assert!(line.contains(" train_loss "));
        assert!(line.contains(" val_loss "));
        assert!(line.contains(" elapsed_s "));
    }

    let ssim = stdout_value(&output, "ssim_score").expect("ssim_score line");
    let mse = stdout_value(&output, "mse_score").expect("mse_score line");
    assert!(ssim > -1.0 && ssim <= 1.0);
    assert!(mse >= 0.0);

    // The written checkpoint is immediately loadable and structurally sound.
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(loaded.params.layers.len(), 3);
    assert_eq!(loaded.params.layers[0].weights.dim(), (64, 1024));
    assert!(loaded.adam.is_some());
    assert_eq!(loaded.config_value("loss"), Some("ssim"));
}

#[test]
fn seeded_cli_runs_are_bit_identical() {
    let data = tempfile::tempdir().unwrap();
    common::write_synthetic_cifar(data.path(), 24, 4, 2);
    // Same out dir both times: the checkpoint echoes the run paths, so only
    // truly identical invocations can be compared byte for byte.
    let base = tempfile::tempdir().unwrap();
    let out = base.path().join("out");

    let mut artifacts = Vec::new();
    for _ in 0..2 {
        let output = run(&[
            "train",
            "--data-dir",
            data.path().to_str().unwrap(),
            "--rate",
            "0.03125",
            "--width-factor",
            "1",
            "--depth",
            "1",
            "--loss",
            "mse",
            "--batch-size",
            "8",
            "--max-epochs",
            "2",
            "--seed",
            "11",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success());
        artifacts.push((
            std::fs::read(out.join("checkpoint.txt")).unwrap(),
            std::fs::read(out.join("train.log")).unwrap(),
            output.stdout,
        ));
        std::fs::remove_dir_all(&out).unwrap();
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "checkpoint bytes differ");
    assert_eq!(artifacts[0].1, artifacts[1].1, "train.log bytes differ");
    assert_eq!(artifacts[0].2, artifacts[1].2, "stdout differs");
}

#[test]
fn out_of_range_rate_is_a_usage_error() {
    let output = run(&["train", "--data-dir", "/nonexistent", "--rate", "1.5"]);
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("rate"));
}

#[test]
fn unknown_flags_and_commands_fail() {
    let output = run(&["train", "--does-not-exist", "1"]);
    assert!(!output.status.success());
    let output = run(&["frobnicate"]);
    assert!(!output.status.success());
}

#[test]
fn eval_identity_checkpoint_scores_perfectly() {
    let data = tempfile::tempdir().unwrap();
    common::write_synthetic_cifar(data.path(), 5, 5, 4);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("identity.ckpt");
    identity_checkpoint(&ckpt);

    let output = Command::new(BIN)
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--subset-test",
            "5",
        ])
        // Data directory through the environment override.
        .env("CS_SSIM_DATA_DIR", data.path())
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(stdout_value(&output, "ssim_score"), Some(1.0));
    assert_eq!(stdout_value(&output, "mse_score"), Some(0.0));
}

#[test]
fn reconstruct_writes_one_pgm_per_image() {
    let data = tempfile::tempdir().unwrap();
    common::write_synthetic_cifar(data.path(), 5, 3, 5);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("identity.ckpt");
    identity_checkpoint(&ckpt);
    let out = tempfile::tempdir().unwrap();

    let output = run(&[
        "reconstruct",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data-dir",
        data.path().to_str().unwrap(),
        "--count",
        "2",
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let first = out.path().join("recon_0000.pgm");
    let second = out.path().join("recon_0001.pgm");
    assert!(first.is_file() && second.is_file());
    assert!(!out.path().join("recon_0002.pgm").exists());

    // Identity network + exact byte quantization round-trip: the PGM pixels
    // must equal the red plane of the first test record.
    let pgm = std::fs::read(&first).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let test_batch = std::fs::read(data.path().join("test_batch.bin")).unwrap();
    assert_eq!(&pgm[header.len()..], &test_batch[1..1 + 1024]);
}

#[test]
fn export_phi_round_trips_the_sensing_matrix() {
    let data = tempfile::tempdir().unwrap();
    common::write_synthetic_cifar(data.path(), 16, 2, 6);
    let out = tempfile::tempdir().unwrap();

    let output = run(&[
        "train",
        "--data-dir",
        data.path().to_str().unwrap(),
        "--rate",
        "0.03125",
        "--width-factor",
        "1",
        "--depth",
        "1",
        "--loss",
        "mse",
        "--batch-size",
        "8",
        "--max-epochs",
        "1",
        "--seed",
        "9",
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert!(output.status.success());

    let ckpt_path = out.path().join("checkpoint.txt");
    let phi_path = out.path().join("phi.txt");
    let output = run(&[
        "export-phi",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--out",
        phi_path.to_str().unwrap(),
    ]);
    assert!(output.status.success());

    let (name, phi) = load_matrix(&phi_path).unwrap();
    assert_eq!(name, "phi");
    let checkpoint = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(phi, checkpoint.params.layers[0].weights);
    assert_eq!(phi.dim(), (32, 1024));
}

#[test]
fn gradcheck_command_passes_and_reports() {
    let output = run(&["gradcheck", "--seed", "7", "--pairs", "6"]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    let lines: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("gradcheck "))
        .collect();
    assert!(lines.len() >= 6, "expected one line per suite: {stdout}");
    for line in lines {
        assert!(line.contains("PASS"), "unexpected status: {line}");
    }
}
