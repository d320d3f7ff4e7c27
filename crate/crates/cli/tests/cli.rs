//! End-to-end checks of the `eba` binary: artifact layout, exit codes,
//! determinism of produced files, and checkpoint resumption.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn eba() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eba"))
}

fn run(args: &[&str]) -> Output {
    eba().args(args).output().expect("spawning eba")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{
  "benchmark": {"classes": 3, "dim": 4, "samples_per_class": 16,
                "source_angles": [15.0, 30.0, 45.0], "target_angles": [0.0, 90.0]},
  "train": {"iterations": 4, "batch_size": 8, "checkpoint_every": 2,
            "net": {"feature_dim": 3, "trunk_hidden": [10], "classifier_hidden": [8],
                     "latent_hidden": 8, "dropout": 0.1},
            "sgld": {"num_steps": 2}}
}"#,
    )
    .unwrap();
    path
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    cfg: PathBuf,
    data: PathBuf,
}

fn gen_fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = write_tiny_config(&root);
    let data = root.join("data");
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert_ok(&out);
    Fixture {
        _dir: dir,
        root,
        cfg,
        data,
    }
}

fn train_fixture(fx: &Fixture, extra: &[&str]) -> PathBuf {
    let out_dir = fx.root.join("run");
    let mut args = vec![
        "train",
        "--config",
        fx.cfg.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_ok(&out);
    out_dir
}

#[test]
fn gen_is_deterministic_and_loadable() {
    let fx = gen_fixture();
    let again = fx.root.join("data2");
    let out = run(&[
        "gen",
        "--config",
        fx.cfg.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert_ok(&out);
    for name in [
        "source_15.csv",
        "source_30.csv",
        "source_45.csv",
        "target_0.csv",
        "target_90.csv",
    ] {
        let a = std::fs::read(fx.data.join(name)).unwrap();
        let b = std::fs::read(again.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical gen runs");
        let ds = eba_core::data::load_feature_csv(&fx.data.join(name), Some(4)).unwrap();
        assert_eq!(ds.len(), 48);
        ds.validate(3).unwrap();
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.data.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 6);
}

#[test]
fn missing_config_exits_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "gen",
        "--config",
        dir.path().join("absent.json").to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent.json"), "stderr was: {err}");
}

#[test]
fn train_writes_loadable_checkpoint_and_full_loss_history() {
    let fx = gen_fixture();
    let run_dir = train_fixture(&fx, &["--iterations", "1"]);
    let ck = run_dir.join("checkpoint_final.bin");
    let (bundle, _) = eba_core::trainer::load_bundle(&ck).unwrap();
    assert_eq!(bundle.num_domains(), 3);
    assert_eq!(bundle.trained_iterations, 1);

    let loss = std::fs::read_to_string(run_dir.join("loss_history.csv")).unwrap();
    let rows: Vec<&str> = loss.lines().collect();
    assert_eq!(rows.len(), 1 + 1 * 3, "header plus one row per (iter, domain)");
    assert!(rows[0].starts_with("iteration,domain,"));
}

#[test]
fn eval_zero_steps_equalizes_pre_and_post() {
    let fx = gen_fixture();
    let run_dir = train_fixture(&fx, &[]);
    let out_dir = fx.root.join("eval0");
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint_final.bin").to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "0",
        "--draws",
        "2",
        "--limit",
        "12",
    ]);
    assert_ok(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    for t in metrics["targets"].as_array().unwrap() {
        assert_eq!(
            t["pre_ensemble_accuracy"], t["post_ensemble_accuracy"],
            "zero steps must not change predictions"
        );
        assert_eq!(t["mean_pre_energy"], t["mean_post_energy"]);
    }
    assert_eq!(metrics["overall"]["num_samples"], 24);
}

#[test]
fn eval_reruns_byte_identical_metrics() {
    let fx = gen_fixture();
    let run_dir = train_fixture(&fx, &[]);
    let ck = run_dir.join("checkpoint_final.bin");
    let mut outputs = Vec::new();
    for name in ["evalA", "evalB"] {
        let out_dir = fx.root.join(name);
        let out = run(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--data",
            fx.data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--draws",
            "2",
            "--limit",
            "10",
            "--seed",
            "3",
        ]);
        assert_ok(&out);
        outputs.push((
            std::fs::read(out_dir.join("metrics.json")).unwrap(),
            std::fs::read(out_dir.join("predictions.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "metrics.json must be byte-identical");
    assert_eq!(outputs[0].1, outputs[1].1, "predictions.csv must be byte-identical");
}

#[test]
fn resumed_training_matches_uninterrupted_loss_values() {
    let fx = gen_fixture();

    let full_dir = train_fixture(&fx, &[]);
    let full = std::fs::read_to_string(full_dir.join("loss_history.csv")).unwrap();

    let half_dir = fx.root.join("half");
    let out = run(&[
        "train",
        "--config",
        fx.cfg.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        half_dir.to_str().unwrap(),
        "--iterations",
        "2",
    ]);
    assert_ok(&out);

    let resumed_dir = fx.root.join("resumed");
    let out = run(&[
        "train",
        "--config",
        fx.cfg.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        resumed_dir.to_str().unwrap(),
        "--resume",
        half_dir.join("checkpoint_final.bin").to_str().unwrap(),
        "--iterations",
        "4",
    ]);
    assert_ok(&out);
    let resumed = std::fs::read_to_string(resumed_dir.join("loss_history.csv")).unwrap();

    let tail: Vec<&str> = full
        .lines()
        .skip(1)
        .filter(|l| {
            let iter: usize = l.split(',').next().unwrap().parse().unwrap();
            iter >= 2
        })
        .collect();
    let resumed_rows: Vec<&str> = resumed.lines().skip(1).collect();
    assert_eq!(resumed_rows.len(), 6, "two resumed iterations over three domains");
    assert_eq!(tail, resumed_rows, "resumed losses must continue the numbering and values");
}

#[test]
fn sweep_rows_cover_every_mode_step_pair() {
    let fx = gen_fixture();
    let run_dir = train_fixture(&fx, &["--iterations", "2"]);
    let out_dir = fx.root.join("sweep");
    let out = run(&[
        "sweep",
        "--checkpoint",
        run_dir.join("checkpoint_final.bin").to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "0,2",
        "--modes",
        "none,prior,oracle",
        "--draws",
        "1",
        "--limit",
        "6",
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for mode in ["none", "prior", "oracle"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(mode)).count(), 2);
    }
}

#[test]
fn trace_rows_account_for_every_chain_step() {
    let fx = gen_fixture();
    let run_dir = train_fixture(&fx, &["--iterations", "2"]);
    let out_dir = fx.root.join("trace");
    let out = run(&[
        "trace",
        "--checkpoint",
        run_dir.join("checkpoint_final.bin").to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--samples",
        "0,3",
        "--steps",
        "2",
        "--draws",
        "2",
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("traces.csv")).unwrap();
    let rows = csv.lines().count() - 1;
    assert_eq!(rows, 2 * 3 * (2 + 1) * 2, "samples x domains x steps x chains");
}
