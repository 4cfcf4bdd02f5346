//! End-to-end tests of the command-line interface: artifact layout, exit
//! statuses, overrides and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_exitdiff")
}

fn scratch() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("exitdiff_cli_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("EXITDIFF_OUT")
        .output()
        .expect("spawn exitdiff")
}

/// Tiny but complete config: depth 3, width 8, 12 diffusion steps.
fn tiny_config_args(extra: &[(&str, &str)]) -> Vec<String> {
    let mut args = vec![
        "--set".into(),
        "model.depth=3".into(),
        "--set".into(),
        "model.hidden_dim=8".into(),
        "--set".into(),
        "model.num_heads=2".into(),
        "--set".into(),
        "schedule.T=12".into(),
        "--set".into(),
        "train.total_steps=30".into(),
        "--set".into(),
        "train.batch_size=4".into(),
        "--set".into(),
        "train.dataset.n=128".into(),
        "--set".into(),
        "train.checkpoint_every=0".into(),
        "--set".into(),
        "eval.steps=6".into(),
        "--set".into(),
        "eval.n_samples=8".into(),
        "--set".into(),
        "eval.probe_batch=16".into(),
        "--set".into(),
        "eval.error_chains=2".into(),
        "--set".into(),
        "seed=3".into(),
    ];
    for (k, v) in extra {
        args.push("--set".into());
        args.push(format!("{k}={v}"));
    }
    args
}

/// One shared trained checkpoint for the read-only commands.
fn trained_checkpoint() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let out = scratch().join("shared_train");
        let mut args: Vec<String> = vec!["train".into(), "--out".into(), out.display().to_string()];
        args.extend(tiny_config_args(&[]));
        let res = Command::new(bin()).args(&args).output().unwrap();
        assert!(
            res.status.success(),
            "shared training failed: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        out.join("ckpt_final.bin")
    })
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = run(&[
        "train",
        "--config",
        "/nonexistent/config.toml",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/config.toml"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = scratch().join("badkey");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "[model]\ndepth = 3\nwidht = 9\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("widht"), "{err}");
}

#[test]
fn override_is_echoed_into_run_directory() {
    let out_dir = scratch().join("echo_override");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--out".into(),
        out_dir.display().to_string(),
    ];
    args.extend(tiny_config_args(&[
        ("exit.threshold", "0.1"),
        ("train.total_steps", "2"),
    ]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let echoed = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("threshold = 0.1"), "{echoed}");
}

#[test]
fn identical_seeds_give_byte_identical_loss_curves() {
    let a = scratch().join("det_a");
    let b = scratch().join("det_b");
    for out_dir in [&a, &b] {
        let mut args: Vec<String> = vec![
            "train".into(),
            "--out".into(),
            out_dir.display().to_string(),
        ];
        args.extend(tiny_config_args(&[]));
        let res = Command::new(bin()).args(&args).output().unwrap();
        assert!(res.status.success());
    }
    let ca = std::fs::read(a.join("loss_curve.csv")).unwrap();
    let cb = std::fs::read(b.join("loss_curve.csv")).unwrap();
    assert_eq!(ca, cb);
    let ha = std::fs::read(a.join("timestep_hist.csv")).unwrap();
    let hb = std::fs::read(b.join("timestep_hist.csv")).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn sample_at_threshold_zero_reports_zero_reduction() {
    let ckpt = trained_checkpoint();
    let out_dir = scratch().join("sample_tau0");
    let mut args: Vec<String> = vec![
        "sample".into(),
        "--checkpoint".into(),
        ckpt.display().to_string(),
        "--out".into(),
        out_dir.display().to_string(),
        "--threshold".into(),
        "0".into(),
        "--n".into(),
        "4".into(),
    ];
    args.extend(tiny_config_args(&[]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let eff = std::fs::read_to_string(out_dir.join("efficiency.csv")).unwrap();
    let data_line = eff.lines().nth(1).unwrap();
    let reduction: f64 = data_line.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(reduction, 0.0, "{eff}");
}

#[test]
fn deterministic_sampler_writes_one_trace_row_per_step() {
    let ckpt = trained_checkpoint();
    let out_dir = scratch().join("sample_det");
    let mut args: Vec<String> = vec![
        "sample".into(),
        "--checkpoint".into(),
        ckpt.display().to_string(),
        "--out".into(),
        out_dir.display().to_string(),
        "--sampler".into(),
        "deterministic".into(),
        "--steps".into(),
        "5".into(),
        "--n".into(),
        "3".into(),
    ];
    args.extend(tiny_config_args(&[]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let traces = std::fs::read_to_string(out_dir.join("traces.csv")).unwrap();
    assert_eq!(traces.lines().count(), 1 + 3 * 5, "{traces}");
    assert!(traces.starts_with("sample,step,t,exit_layer,u_at_exit"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error_naming_the_path() {
    let out = run(&[
        "sample",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--out",
        "/tmp/x",
        "--n",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/model.ckpt"), "{err}");
}

#[test]
fn sweep_emits_one_point_per_threshold() {
    let ckpt = trained_checkpoint();
    let out_dir = scratch().join("sweep");
    let mut args: Vec<String> = vec![
        "sweep".into(),
        "--checkpoint".into(),
        ckpt.display().to_string(),
        "--out".into(),
        out_dir.display().to_string(),
        "--thresholds".into(),
        "0.2,0.1,0.05,0.02,0.01".into(),
        "--n".into(),
        "6".into(),
    ];
    args.extend(tiny_config_args(&[]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("tradeoff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5, "{csv}");
    assert!(out_dir.join("tradeoff.png").exists());
}

#[test]
fn empty_threshold_list_is_a_config_error() {
    let ckpt = trained_checkpoint();
    let out = run(&[
        "sweep",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        "/tmp/x",
        "--thresholds",
        "",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_writes_metrics_and_error_curve() {
    let ckpt = trained_checkpoint();
    let out_dir = scratch().join("eval");
    let mut args: Vec<String> = vec![
        "eval".into(),
        "--checkpoint".into(),
        ckpt.display().to_string(),
        "--out".into(),
        out_dir.display().to_string(),
        "--n".into(),
        "8".into(),
    ];
    args.extend(tiny_config_args(&[]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["mmd"].as_f64().unwrap().is_finite());
    assert!(metrics["avg_layers"].as_f64().unwrap() >= 1.0);
    let err_csv = std::fs::read_to_string(out_dir.join("error_accum.csv")).unwrap();
    assert_eq!(err_csv.lines().count(), 1 + 12);
}

#[test]
fn profile_on_untrained_model_is_finite() {
    // An untrained model comes from a 1-step training run.
    let out_train = scratch().join("profile_train");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--out".into(),
        out_train.display().to_string(),
    ];
    args.extend(tiny_config_args(&[("train.total_steps", "1")]));
    assert!(Command::new(bin())
        .args(&args)
        .output()
        .unwrap()
        .status
        .success());

    let out_dir = scratch().join("profile");
    let mut args: Vec<String> = vec![
        "profile".into(),
        "--checkpoint".into(),
        out_train.join("ckpt_final.bin").display().to_string(),
        "--out".into(),
        out_dir.display().to_string(),
    ];
    args.extend(tiny_config_args(&[]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("redundancy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    for line in csv.lines().skip(1) {
        for cell in line.split(',').skip(1) {
            let v: f64 = cell.parse().unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn reruns_reproduce_sample_artifacts_byte_for_byte() {
    let ckpt = trained_checkpoint();
    let a = scratch().join("idem_a");
    let b = scratch().join("idem_b");
    for out_dir in [&a, &b] {
        let mut args: Vec<String> = vec![
            "sample".into(),
            "--checkpoint".into(),
            ckpt.display().to_string(),
            "--out".into(),
            out_dir.display().to_string(),
            "--sampler".into(),
            "deterministic".into(),
            "--steps".into(),
            "6".into(),
            "--n".into(),
            "4".into(),
        ];
        args.extend(tiny_config_args(&[]));
        assert!(Command::new(bin())
            .args(&args)
            .output()
            .unwrap()
            .status
            .success());
    }
    for name in ["traces.csv", "efficiency.csv", "samples.bin", "config.toml"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical reruns");
    }
}

#[test]
fn resume_with_conflicting_config_reports_differing_keys() {
    let ckpt = trained_checkpoint();
    let out_dir = scratch().join("resume_conflict");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--out".into(),
        out_dir.display().to_string(),
        "--resume".into(),
        ckpt.display().to_string(),
    ];
    // Same tiny config but a different learning rate: must be rejected.
    args.extend(tiny_config_args(&[("train.learning_rate", "0.001")]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("train.learning_rate"), "{err}");
}

#[test]
fn resume_with_matching_config_continues() {
    let out_first = scratch().join("resume_first");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--out".into(),
        out_first.display().to_string(),
    ];
    args.extend(tiny_config_args(&[
        ("train.total_steps", "6"),
        ("train.checkpoint_every", "3"),
    ]));
    assert!(Command::new(bin())
        .args(&args)
        .output()
        .unwrap()
        .status
        .success());

    let out_resumed = scratch().join("resume_second");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--out".into(),
        out_resumed.display().to_string(),
        "--resume".into(),
        out_first.join("ckpt_0000003.bin").display().to_string(),
    ];
    args.extend(tiny_config_args(&[
        ("train.total_steps", "6"),
        ("train.checkpoint_every", "3"),
    ]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    // The resumed run's final parameters equal the uninterrupted run's.
    let a = std::fs::read(out_first.join("ckpt_final.bin")).unwrap();
    let b = std::fs::read(out_resumed.join("ckpt_final.bin")).unwrap();
    let tail = |v: &[u8]| v[v.len() - 4096..].to_vec();
    assert_eq!(
        tail(&a),
        tail(&b),
        "resumed tensors differ from the uninterrupted run"
    );
}

#[test]
fn tiny_image_mode_trains_and_exports_token_maps() {
    let out_train = scratch().join("img_train");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--out".into(),
        out_train.display().to_string(),
    ];
    args.extend(tiny_config_args(&[
        ("train.dataset.kind", "\"tiny_image\""),
        ("model.patch_size", "4"),
        ("train.total_steps", "3"),
    ]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );

    let out_sample = scratch().join("img_sample");
    let mut args: Vec<String> = vec![
        "sample".into(),
        "--checkpoint".into(),
        out_train.join("ckpt_final.bin").display().to_string(),
        "--out".into(),
        out_sample.display().to_string(),
        "--sampler".into(),
        "deterministic".into(),
        "--steps".into(),
        "4".into(),
        "--n".into(),
        "2".into(),
        "--map-steps".into(),
        "0,3".into(),
    ];
    args.extend(tiny_config_args(&[
        ("train.dataset.kind", "\"tiny_image\""),
        ("model.patch_size", "4"),
    ]));
    let res = Command::new(bin()).args(&args).output().unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    // 8x8 images at patch 4 give a 2x2 token grid per map.
    let maps: Vec<_> = std::fs::read_dir(out_sample.join("maps"))
        .unwrap()
        .collect();
    assert_eq!(maps.len(), 2 * 2);
}

#[test]
fn env_var_provides_default_output_root() {
    let root = scratch().join("env_root");
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(tiny_config_args(&[("train.total_steps", "1")]));
    let res = Command::new(bin())
        .args(&args)
        .env("EXITDIFF_OUT", &root)
        .output()
        .unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(root.join("train-seed3").join("ckpt_final.bin").exists());
}
