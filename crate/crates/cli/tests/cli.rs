//! End-to-end checks of the command-line surface: determinism of record
//! streams, exit codes, and artifact emission.

use std::path::Path;
use std::process::Command;

fn ddae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddae"))
}

fn micro_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "schedule": {"t_count": 20},
        "train": {"epochs": 2, "batch_size": 16, "checkpoint_every": 1},
        "probe": {
            "ts": [2, 10],
            "taps": [
                {"path": "mid", "stage": 2, "block": 0, "resolution": 8},
                {"path": "up", "stage": 0, "block": 1, "resolution": 32}
            ],
            "opts": {"epochs": 2, "batch_size": 16, "learning_rate": 0.01,
                      "lr_schedule": "cosine", "seed": 0, "held_out_frac": 0.2}
        },
        "finetune": {"epochs": 1, "batch_size": 16},
        "dataset": {"take": 24, "synth_n": 24},
        "sample": {"n_images": 2, "grid_cols": 2},
        "out_dir": out.display().to_string()
    });
    let path = dir.join("micro.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn records_without_walltime(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn pretrain_records_are_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut streams = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let cfg = micro_config(dir.path(), &out);
        let status = ddae()
            .args(["--config", cfg.to_str().unwrap(), "--seed", "5", "pretrain"])
            .status()
            .unwrap();
        assert!(status.success());
        streams.push(records_without_walltime(&out.join("records.jsonl")));
    }
    assert_eq!(streams[0], streams[1]);
    assert!(!streams[0].is_empty());
}

#[test]
fn full_surface_smoke_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = micro_config(dir.path(), &out);
    let cfg_arg = cfg.to_str().unwrap();

    let ok = |args: &[&str]| {
        let status = ddae().args(["--config", cfg_arg]).args(args).status().unwrap();
        assert!(status.success(), "{args:?}");
    };
    ok(&["pretrain"]);
    assert!(out.join("ckpt_epoch0002.ckpt").is_file());
    ok(&["gridsearch"]);
    assert!(out.join("gridreport.json").is_file());
    ok(&["probe", "--tap", "up:0:1", "--t", "2"]);
    ok(&["finetune", "--tap", "mid:2:0", "--t", "2", "--scratch"]);
    ok(&["metrics", "--tap", "up:0:1", "--t", "2", "--with-classifier"]);
    assert!(out.join("classifier.ckpt").is_file());
    ok(&[
        "sample", "-n", "2", "--classifier",
        out.join("classifier.ckpt").to_str().unwrap(),
        "--target", "1", "--scale", "0.5",
    ]);
    assert!(out.join("samples.png").is_file());
    assert!(out.join("samples.ckpt").is_file());
    ok(&["fid", "--generated", out.join("samples.ckpt").to_str().unwrap(), "-n", "8"]);
    let records = out.join("records.jsonl");
    ok(&[
        "plot", "--records", records.to_str().unwrap(),
        "--key", "loss",
        "--csv", out.join("loss.csv").to_str().unwrap(),
    ]);
    assert!(out.join("plot.svg").is_file());
    assert!(out.join("loss.csv").is_file());
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");

    // unknown preset: configuration error, code 2
    let status = ddae().args(["--preset", "nope", "pretrain"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));

    // invalid config value: code 2
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"probe": {"ts": [99999]}}"#).unwrap();
    let status = ddae()
        .args(["--config", bad.to_str().unwrap(), "pretrain"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // missing dataset file: data error, code 3
    let data_cfg = dir.path().join("data.json");
    std::fs::write(
        &data_cfg,
        serde_json::json!({
            "dataset": {"format": "cifar10", "path": dir.path().join("missing.bin").display().to_string()},
            "out_dir": out.display().to_string()
        })
        .to_string(),
    )
    .unwrap();
    let status = ddae()
        .args(["--config", data_cfg.to_str().unwrap(), "pretrain"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));

    // malformed CIFAR file: code 3 with the offending offset
    let stub = dir.path().join("trunc.bin");
    std::fs::write(&stub, vec![0u8; 3073 + 5]).unwrap();
    let data_cfg = dir.path().join("trunc.json");
    std::fs::write(
        &data_cfg,
        serde_json::json!({
            "dataset": {"format": "cifar10", "path": stub.display().to_string()},
            "out_dir": out.display().to_string()
        })
        .to_string(),
    )
    .unwrap();
    let output = ddae()
        .args(["--config", data_cfg.to_str().unwrap(), "pretrain"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("offset"), "{stderr}");
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = micro_config(dir.path(), &out);
    let cfg_arg = cfg.to_str().unwrap();
    // train both epochs, then re-run from the epoch-1 checkpoint; the final
    // weights must agree bitwise with the continuous run
    let status = ddae().args(["--config", cfg_arg, "pretrain"]).status().unwrap();
    assert!(status.success());
    let continuous = std::fs::read(out.join("ckpt_epoch0002.ckpt")).unwrap();
    let resumed_out = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed_out).unwrap();
    for name in [
        "ckpt_epoch0001.ckpt",
        "ckpt_epoch0001.ckpt.json",
        "ckpt_epoch0001.opt",
        "ckpt_epoch0001.state.json",
    ] {
        std::fs::copy(out.join(name), resumed_out.join(name)).unwrap();
    }
    let status = ddae()
        .args([
            "--config", cfg_arg,
            "--out", resumed_out.to_str().unwrap(),
            "pretrain",
            "--resume", resumed_out.join("ckpt_epoch0001.ckpt").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let resumed = std::fs::read(resumed_out.join("ckpt_epoch0002.ckpt")).unwrap();
    assert_eq!(continuous, resumed, "resumed weights diverged from continuous training");
}
