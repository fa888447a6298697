//! End-to-end contract tests for the `artifix` binary: exit codes, error
//! lines, dry runs, and a miniature run of the full pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_artifix");

/// A config small enough that the whole pipeline finishes in seconds.
const TINY_CONFIG: &str = r#"
master_seed = 7

[autoencoder]
corpus_size = 12
image_size = 32
latent_dim = 2
codebook_size = 8
widths = [6, 8, 10]
steps = 40
batch_size = 4
learning_rate = 2e-3
commitment_weight = 0.25
refresh_interval = 20

[token_model]
dim = 12
layers = 1
steps = 30
batch_size = 4
learning_rate = 1e-3

[uncond_diffusion]
widths = [8, 12, 16]
emb_dim = 8
t_count = 50
beta_start = 1e-4
beta_end = 2e-2
steps = 30
batch_size = 4
learning_rate = 1e-3

[artifacts]
train_count = 6
test_count = 4
assignment = "uniform"
rect_h = 2
rect_w = 2
temperature = 2.0
top_k = 4
keep_fraction = 0.9
t0 = 30
n_steps = 4
alpha = 0.3
gamma = 1.015
beta = 0.01
test_alpha = 0.25
test_gamma = 1.009
test_beta = 0.005

[restorer]
widths = [8, 12, 16]
emb_dim = 8
t_count = 50
beta_start = 1e-4
beta_end = 2e-2
steps = 30
batch_size = 4
learning_rate = 1e-3
mask_prob = 0.5

[eval]
steps = 3
guidance_scale = 2.0
count = 2
"#;

fn artifix(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ARTIFIX_OUT")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let v: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr not JSON: {stderr}"));
    v["error"].as_str().expect("error kind").to_string()
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn inspect_schedule_prints_monotone_alpha_bar() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let csv = tmp.path().join("schedule.csv");
    let out = artifix(
        &config,
        tmp.path(),
        &[
            "inspect-schedule",
            "--t-count",
            "100",
            "--csv",
            csv.to_str().unwrap(),
        ],
    );
    assert_ok(&out, "inspect-schedule");

    let table = fs::read_to_string(&csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("t,beta,alpha,alpha_bar"));
    let bars: Vec<f64> = lines
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(bars.len(), 100);
    assert!(bars.windows(2).all(|w| w[1] < w[0]));
    assert!(bars.iter().all(|&b| b > 0.0 && b < 1.0));
}

#[test]
fn missing_checkpoint_is_a_dependency_error() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let out = artifix(&config, tmp.path(), &["train-tokens"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "dependency");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train-ae"), "hint missing: {stderr}");
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let out_root = tmp.path().join("never-created");
    for cmd in [
        "train-ae",
        "train-tokens",
        "train-uncond",
        "train-restorer",
        "synth",
    ] {
        let out = artifix(&config, &out_root, &[cmd, "--dry-run"]);
        assert_ok(&out, cmd);
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("dry run"),
            "{cmd} did not announce the dry run"
        );
    }
    assert!(!out_root.exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("config.toml");
    fs::write(&config, "master_seed = 1\n[autoencoder]\nwdiths = [1]\n").unwrap();
    let out = artifix(&config, tmp.path(), &["train-ae", "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn nonblind_restore_requires_a_class() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let input = tmp.path().join("x.png");
    fs::write(&input, b"not really a png").unwrap();
    let out = artifix(
        &config,
        tmp.path(),
        &["restore", input.to_str().unwrap(), "--mode", "nonblind"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
}

#[test]
fn metrics_reports_zero_distance_for_identical_images() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let img = artifix_core_test_image(tmp.path());
    let csv = tmp.path().join("m.csv");
    let out = artifix(
        &config,
        tmp.path(),
        &[
            "metrics",
            img.to_str().unwrap(),
            img.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ],
    );
    assert_ok(&out, "metrics");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mse: 0"), "unexpected output: {stdout}");
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("mse,psnr,ssim\n"));
}

fn artifix_core_test_image(dir: &Path) -> PathBuf {
    let img = artifix::corpus::clean_image(3, 0);
    let path = dir.join("clean.png");
    artifix::imageio::save_image_png(&path, &img).unwrap();
    path
}

/// Runs every stage through the binary at miniature scale, twice for the
/// autoencoder to pin down byte determinism, and checks the files each
/// stage promises.
#[test]
fn tiny_pipeline_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let root = tmp.path().join("runs");

    assert_ok(&artifix(&config, &root, &["train-ae"]), "train-ae");
    for f in ["ae.ckpt", "ae_curve.csv"] {
        assert!(root.join(f).is_file(), "{f} missing");
    }

    // Re-running the same stage into a fresh root reproduces the outputs
    // byte for byte.
    let root2 = tmp.path().join("runs2");
    assert_ok(&artifix(&config, &root2, &["train-ae"]), "train-ae rerun");
    assert_eq!(
        fs::read(root.join("ae.ckpt")).unwrap(),
        fs::read(root2.join("ae.ckpt")).unwrap(),
        "checkpoint bytes differ between identical runs"
    );
    assert_eq!(
        fs::read(root.join("ae_curve.csv")).unwrap(),
        fs::read(root2.join("ae_curve.csv")).unwrap(),
        "curve bytes differ between identical runs"
    );

    assert_ok(&artifix(&config, &root, &["train-tokens"]), "train-tokens");
    assert_ok(&artifix(&config, &root, &["train-uncond"]), "train-uncond");
    assert_ok(
        &artifix(&config, &root, &["synth", "--split", "train"]),
        "synth train",
    );
    assert_ok(
        &artifix(&config, &root, &["synth", "--split", "test"]),
        "synth test",
    );
    for f in [
        "tokens.ckpt",
        "tokens_curve.csv",
        "uncond.ckpt",
        "uncond_curve.csv",
        "dataset-train/manifest.jsonl",
        "dataset-test/manifest.jsonl",
    ] {
        assert!(root.join(f).is_file(), "{f} missing");
    }

    assert_ok(&artifix(&config, &root, &["train-restorer"]), "train-restorer");
    assert!(root.join("restorer.ckpt").is_file());
    let curve = fs::read_to_string(root.join("restorer_curve.csv")).unwrap();
    assert!(curve.starts_with("step,loss,masking_rate\n"));

    // Restore one dataset artifact in every mode through the CLI.
    let artifact = root.join("dataset-test/artifact/00000.png");
    assert!(artifact.is_file());
    let restored_blind = root.join("dataset-test/artifact/00000.restored-blind.png");
    assert_ok(
        &artifix(
            &config,
            &root,
            &[
                "restore",
                artifact.to_str().unwrap(),
                "--mode",
                "blind",
                "--steps",
                "3",
            ],
        ),
        "restore blind",
    );
    assert!(restored_blind.is_file());
    let restored = artifix::imageio::load_image_png(&restored_blind).unwrap();
    assert_eq!(restored.shape(), &[3, 32, 32]);

    assert_ok(
        &artifix(
            &config,
            &root,
            &[
                "restore",
                artifact.to_str().unwrap(),
                "--mode",
                "guided",
                "--class",
                "replace_token",
                "--scale",
                "2",
                "--steps",
                "3",
            ],
        ),
        "restore guided",
    );
    assert!(root
        .join("dataset-test/artifact/00000.restored-guided-replace_token-s2.png")
        .is_file());

    // Evaluation produces the report plus both sweep tables.
    assert_ok(
        &artifix(
            &config,
            &root,
            &[
                "eval",
                "--modes",
                "blind,guided",
                "--sweep-scale",
                "1:2",
                "--sweep-steps",
                "2,3",
            ],
        ),
        "eval",
    );
    let report = fs::read_to_string(root.join("eval_report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("mode,class,count,mse,psnr,ssim"));
    // Two modes, each with four per-class rows and one overall row.
    assert_eq!(lines.count(), 10);
    assert!(report.contains("OVERALL"));

    let sweep = fs::read_to_string(root.join("sweep_scale.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.starts_with("scale,mse,psnr,ssim\n"));
    let sweep = fs::read_to_string(root.join("sweep_steps.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.starts_with("steps,mse,psnr,ssim\n"));
}
