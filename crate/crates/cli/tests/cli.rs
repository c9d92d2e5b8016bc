//! End-to-end checks of the `coop` binary: command wiring, file formats, and
//! exit-code discipline.

use std::path::Path;
use std::process::{Command, Output};

fn coop(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coop"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    let json = format!(
        r#"{{
  "arch": {{
    "stem": {{ "kind": "linear", "in_features": 2 }},
    "block": {{ "kind": "mlp" }},
    "stages": [ {{ "repeats": 2, "channels": 8 }}, {{ "repeats": 2, "channels": 8 }} ],
    "num_classes": 3,
    "rounding": "calibrated"
  }},
  "train": {{
    "epochs": 4, "batch_size": 32, "seed": {seed}, "boundaries": [2, 3, 4],
    "warmup_lr": 0.001, "rates": [0.01, 0.001, 0.0001, 0.00001],
    "checkpoint_every": 2
  }},
  "sampler": {{ "kind": "random" }},
  "data": {{ "kind": "spirals", "n": 200, "noise": 0.04, "classes": 3, "seed": 5 }}
}}"#
    );
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn profile_reproduces_preset_params_and_select_reads_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = coop(
        &["profile", "--arch", "resnet152-cifar", "--input", "32x32", "--out", "table.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    // The 1.0x row is in the 58.34M neighborhood.
    assert!(text.contains("58341028"), "profile output:\n{text}");

    let picked = coop(&["select", "--table", "table.csv", "--flops", "2.0e9"], dir.path());
    assert!(picked.status.success());
    assert_eq!(stdout(&picked).trim(), "0.4");

    // Infeasible budgets use their own exit code.
    let infeasible = coop(&["select", "--table", "table.csv", "--flops", "1e6"], dir.path());
    assert_eq!(infeasible.status.code(), Some(4));

    // Missing table file is an I/O error.
    let missing = coop(&["select", "--table", "nope.csv", "--flops", "1e9"], dir.path());
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn gradcheck_command_passes_and_prints_per_case_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = coop(&["gradcheck", "--seed", "3"], dir.path());
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.contains("PASS")).count() >= 20);
    assert!(text.contains("all") && text.contains("gradient checks passed"));
}

#[test]
fn gen_data_is_deterministic_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        let out = coop(
            &["gen-data", "--kind", "spirals", "--n", "99", "--seed", "7", "--out", name],
            dir.path(),
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b, "same seed must produce identical bytes");

    let grid = coop(
        &["gen-data", "--kind", "blobs", "--n", "30", "--grid", "8", "--out", "g.bin"],
        dir.path(),
    );
    assert!(grid.status.success());
    assert!(dir.path().join("g.bin").exists());
    assert!(dir.path().join("g.bin.json").exists());
}

#[test]
fn train_eval_resume_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 11);

    let out = coop(
        &["train", "--config", cfg.to_str().unwrap(), "--out-dir", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let run = dir.path().join("run");
    assert!(run.join("metrics.jsonl").exists());
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("epoch_0002.ckpt").exists());

    // Two identical-seed runs produce identical metric values.
    let out2 = coop(
        &["train", "--config", cfg.to_str().unwrap(), "--out-dir", "run2"],
        dir.path(),
    );
    assert!(out2.status.success());
    let strip = |p: &Path| {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["wall_time_ms"] = 0.into();
                v.to_string()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(
        strip(&run.join("metrics.jsonl")),
        strip(&dir.path().join("run2/metrics.jsonl"))
    );

    // Resume from the midpoint checkpoint.
    let resumed = coop(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--resume",
            run.join("epoch_0002.ckpt").to_str().unwrap(),
            "--out-dir",
            "run3",
        ],
        dir.path(),
    );
    assert!(resumed.status.success(), "{resumed:?}");
    let tail = strip(&dir.path().join("run3/metrics.jsonl"));
    let full = strip(&run.join("metrics.jsonl"));
    assert_eq!(tail, full[2..].to_vec(), "resumed tail must match");

    // Eval prints a per-factor table.
    let eval = coop(
        &[
            "eval",
            "--ckpt",
            run.join("final.ckpt").to_str().unwrap(),
            "--factors",
            "0.2,0.6,1.0",
        ],
        dir.path(),
    );
    assert!(eval.status.success(), "{eval:?}");
    let text = stdout(&eval);
    assert!(text.contains("factor") && text.contains("teammate_a"));
    assert!(text.contains("1.00x") && text.contains("0.20x"));

    // A checkpoint trained under a different seed will not resume under this
    // config (config hash mismatch -> I/O class exit code).
    let other_cfg = tiny_config(&dir.path().join("run2"), 12);
    let mismatch = coop(
        &[
            "train",
            "--config",
            other_cfg.to_str().unwrap(),
            "--resume",
            run.join("final.ckpt").to_str().unwrap(),
            "--out-dir",
            "run4",
        ],
        dir.path(),
    );
    assert_eq!(mismatch.status.code(), Some(3));
}

#[test]
fn coop_seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 11);
    let out = Command::new(env!("CARGO_BIN_EXE_coop"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out-dir", "enva"])
        .env("COOP_SEED", "99")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let written: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("enva/config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(written["train"]["seed"], 99);
}

#[test]
fn invalid_config_exits_with_config_code_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{
  "arch": {
    "stem": { "kind": "linear", "in_features": 2 },
    "block": { "kind": "mlp" },
    "stages": [ { "repeats": 2, "channels": 8 } ],
    "num_classes": 3
  },
  "train": { "boundaries": [50, 40, 60] }
}"#,
    )
    .unwrap();
    let out = coop(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("train.boundaries"), "stderr: {err}");
}
