//! End-to-end tests of the `qrvae` binary: artifact layout, determinism and
//! the exit-code contract (0 success, 1 numeric failure, 2 usage/input).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qrvae"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning qrvae")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn sha256_file(path: &Path) -> String {
    qrvae::config::file_sha256(path).unwrap()
}

fn write_tiny_moons_configs(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data.toml");
    std::fs::write(
        &data,
        "kind = \"moons\"\nn_train = 64\nn_val = 16\nn_test = 32\nseed = 5\n",
    )
    .unwrap();
    let config = dir.join("exp.toml");
    std::fs::write(
        &config,
        r#"
[model]
kind = "qrvae"
arch = "mlp"
input_shape = [4]
latent_dim = 2
hidden = 16
alphas = [0.15, 0.5]

[train]
epochs = 5
batch_size = 16
lr = 1e-3
seed = 3
"#,
    )
    .unwrap();
    (data, config)
}

#[test]
fn simulate_writes_row_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let res = run(&[
            "simulate",
            "--n",
            "500",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
    }
    let latent = std::fs::read_to_string(out1.join("latent.csv")).unwrap();
    assert_eq!(latent.lines().count(), 501); // header + 500 rows
    let observed = std::fs::read_to_string(out1.join("observed.csv")).unwrap();
    assert_eq!(observed.lines().count(), 501);
    assert!(observed.starts_with("v1,v2,v3,v4\n"));
    for name in ["latent.csv", "observed.csv", "manifest.txt"] {
        assert_eq!(
            sha256_file(&out1.join(name)),
            sha256_file(&out2.join(name)),
            "checksum mismatch for {name}"
        );
    }
}

#[test]
fn simulate_rejects_zero_points() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&["simulate", "--n", "0", "--out", dir.path().to_str().unwrap()]);
    assert_code(&res, 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let res = run(&["simulate", "--frobnicate"]);
    assert_code(&res, 2);
}

#[test]
fn train_produces_checkpoint_and_log_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = write_tiny_moons_configs(dir.path());
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let res = run(&[
            "train",
            "--model",
            "qrvae",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
        assert!(out.join("checkpoint.ckpt").is_file());
        assert!(out.join("train_log.csv").is_file());
    }
    assert_eq!(
        sha256_file(&out1.join("checkpoint.ckpt")),
        sha256_file(&out2.join("checkpoint.ckpt"))
    );
    // manifests embed the deterministic log checksum, so they must agree too
    assert_eq!(
        sha256_file(&out1.join("manifest.txt")),
        sha256_file(&out2.join("manifest.txt"))
    );
    let log = std::fs::read_to_string(out1.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,sigma_stat,seconds\n"));
    assert_eq!(log.lines().count(), 1 + 6); // header + baseline + 5 epochs
}

#[test]
fn train_with_missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = write_tiny_moons_configs(dir.path());
    let res = run(&[
        "train",
        "--data",
        dir.path().join("nope.toml").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_code(&res, 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("nope.toml"));
}

#[test]
fn train_nan_abort_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_tiny_moons_configs(dir.path());
    // An absurd learning rate overflows the unclamped encoder produces
    // within a few steps.
    let config = dir.path().join("explode.toml");
    std::fs::write(
        &config,
        r#"
[model]
kind = "vae"
arch = "mlp"
input_shape = [4]
latent_dim = 2
hidden = 16

[train]
epochs = 40
batch_size = 16
lr = 1e4
seed = 3
"#,
    )
    .unwrap();
    let res = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_code(&res, 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("non-finite"));
}

#[test]
fn eval_kl_self_comparison_is_near_zero_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = write_tiny_moons_configs(dir.path());
    let train_out = dir.path().join("train");
    assert_code(
        &run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]),
        0,
    );
    let ckpt = train_out.join("checkpoint.ckpt");
    let kl1 = dir.path().join("kl1");
    let kl2 = dir.path().join("kl2");
    for out in [&kl1, &kl2] {
        let res = run(&[
            "eval-kl",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--n-samples",
            "200",
            "--z-source",
            "prior",
            "--seed",
            "4",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
    }
    assert_eq!(
        sha256_file(&kl1.join("kl_report.csv")),
        sha256_file(&kl2.join("kl_report.csv"))
    );
    let report = std::fs::read_to_string(kl1.join("kl_report.csv")).unwrap();
    assert!(report.starts_with("metric,value\n"));
    // the dataset-vs-itself baseline sits near zero
    let baseline: f64 = report
        .lines()
        .find(|l| l.starts_with("kl_self_baseline_nats,"))
        .and_then(|l| l.split(',').nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(baseline.abs() < 0.35, "self-KL baseline {baseline}");
    for name in ["kde_input_v1v2.csv", "kde_model_v1v2.csv", "kde_input_v2v3.csv", "kde_model_v2v3.csv"]
    {
        assert!(kl1.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn detect_refuses_alpha_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = write_tiny_moons_configs(dir.path());
    let train_out = dir.path().join("train");
    assert_code(
        &run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]),
        0,
    );
    // checkpoint has alphas [0.15, 0.5]; interval mode demands [0.025, 0.975]
    let res = run(&[
        "detect",
        "--checkpoint",
        train_out.join("checkpoint.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--mode",
        "interval",
        "--out",
        dir.path().join("det").to_str().unwrap(),
    ]);
    assert_code(&res, 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("incompatible checkpoint"));
}

#[test]
fn detect_fdr_on_moons_emits_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = write_tiny_moons_configs(dir.path());
    let train_out = dir.path().join("train");
    assert_code(
        &run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]),
        0,
    );
    let det = dir.path().join("det");
    let res = run(&[
        "detect",
        "--checkpoint",
        train_out.join("checkpoint.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--mode",
        "fdr",
        "--q",
        "0.05",
        "--out",
        det.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    assert!(det.join("metrics.csv").is_file());
    assert!(det.join("mask_000.pgm").is_file());
    assert!(det.join("z_map_000.csv").is_file());
    assert!(det.join("p_map_000.csv").is_file());
    let pgm = std::fs::read(det.join("mask_000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn report_aggregates_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = write_tiny_moons_configs(dir.path());
    let train_out = dir.path().join("runs/train");
    assert_code(
        &run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]),
        0,
    );
    let kl_out = dir.path().join("runs/kl");
    assert_code(
        &run(&[
            "eval-kl",
            "--checkpoint",
            train_out.join("checkpoint.ckpt").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--n-samples",
            "100",
            "--out",
            kl_out.to_str().unwrap(),
        ]),
        0,
    );
    let runs = dir.path().join("runs");
    assert_code(&run(&["report", "--dir", runs.to_str().unwrap()]), 0);
    let summary1 = std::fs::read_to_string(runs.join("summary.csv")).unwrap();
    assert!(summary1.contains("kl_nats"));
    assert!(summary1.contains("final_val_loss"));
    assert!(summary1.contains("config_hash"));
    assert_code(&run(&["report", "--dir", runs.to_str().unwrap()]), 0);
    let summary2 = std::fs::read_to_string(runs.join("summary.csv")).unwrap();
    assert_eq!(summary1, summary2);
}

#[test]
fn report_on_empty_dir_lists_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&["report", "--dir", dir.path().to_str().unwrap()]);
    assert_code(&res, 2);
    let stderr = String::from_utf8_lossy(&res.stderr);
    for name in ["metrics.csv", "kl_report.csv", "train_log.csv"] {
        assert!(stderr.contains(name), "{stderr}");
    }
}

#[test]
fn out_root_env_var_redirects_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let res = bin()
        .args(["simulate", "--n", "8", "--seed", "1", "--out", "rooted"])
        .env("QRVAE_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert_code(&res, 0);
    assert!(dir.path().join("rooted/observed.csv").is_file());
}
