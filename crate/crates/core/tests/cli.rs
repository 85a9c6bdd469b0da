use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

use metatl::meta::initial_params;
use metatl::snapshot;
use metatl::HyperParams;

fn metatl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metatl"))
        .args(args)
        .output()
        .unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Small synthetic log: 40 items, 200 train users, 30 test users.
    fn generate(&self, name: &str, seed: &str) -> PathBuf {
        let out = self.path(name);
        let status = metatl(&[
            "gen",
            "--n-items",
            "40",
            "--n-train-users",
            "200",
            "--n-test-users",
            "30",
            "--noise",
            "0.1",
            "--seed",
            seed,
            "--output",
            path_str(&out),
        ]);
        assert_eq!(
            status.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        out
    }

    fn train(&self, data: &Path, checkpoint: &Path, extra: &[&str]) -> Output {
        let defaults = [
            ("--dim", "8"),
            ("--epochs", "1"),
            ("--tasks-per-epoch", "64"),
            ("--meta-batch", "16"),
        ];
        run_with_defaults("train", data, checkpoint, &defaults, extra)
    }

    /// The 40-item vocabulary cannot supply the default 100 negatives.
    fn eval(&self, data: &Path, checkpoint: &Path, extra: &[&str]) -> Output {
        run_with_defaults(
            "eval",
            data,
            checkpoint,
            &[("--eval-negatives", "20")],
            extra,
        )
    }
}

fn run_with_defaults(
    command: &str,
    data: &Path,
    checkpoint: &Path,
    defaults: &[(&str, &str)],
    extra: &[&str],
) -> Output {
    let mut args = vec![
        command,
        "--data",
        path_str(data),
        "--checkpoint",
        path_str(checkpoint),
    ];
    for &(flag, value) in defaults {
        if !extra.contains(&flag) {
            args.extend([flag, value]);
        }
    }
    args.extend_from_slice(extra);
    metatl(&args)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn missing_dataset_is_input_error_without_checkpoint() {
    let ws = Workspace::new();
    let ckpt = ws.path("model.bin");
    let out = ws.train(&ws.path("absent.tsv"), &ckpt, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ckpt.exists());
}

#[test]
fn zero_epochs_writes_the_initialisation() {
    let ws = Workspace::new();
    let data = ws.generate("log.tsv", "1");
    let ckpt = ws.path("init.bin");
    let out = ws.train(&data, &ckpt, &["--epochs", "0", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let saved = snapshot::load(&ckpt).unwrap();
    let hp = HyperParams {
        dim: 8,
        seed: 4,
        ..Default::default()
    };
    assert_eq!(saved, initial_params(40, &hp).unwrap());
}

#[test]
fn training_streams_metrics_and_is_reproducible() {
    let ws = Workspace::new();
    let data = ws.generate("log.tsv", "2");
    let (a, b) = (ws.path("a.bin"), ws.path("b.bin"));
    let metrics = ws.path("metrics.jsonl");
    let first = ws.train(&data, &a, &["--seed", "9", "--metrics", path_str(&metrics)]);
    let second = ws.train(&data, &b, &["--seed", "9", "--workers", "1"]);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let lines: Vec<serde_json::Value> = String::from_utf8(first.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line["step"], i + 1);
        for key in ["tasks", "support_loss", "query_loss", "wall_time"] {
            assert!(line.get(key).is_some(), "{key} missing");
        }
    }
    assert_eq!(
        std::fs::read_to_string(&metrics).unwrap().lines().count(),
        4
    );
}

#[test]
fn eval_reports_all_fields_and_writes_csv() {
    let ws = Workspace::new();
    let data = ws.generate("log.tsv", "3");
    let ckpt = ws.path("m.bin");
    assert_eq!(ws.train(&data, &ckpt, &[]).status.code(), Some(0));
    let csv = ws.path("users.csv");
    let out = ws.eval(&data, &ckpt, &["--eval-csv", path_str(&csv)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    for key in ["mrr", "hit_at_1", "users_evaluated", "K"] {
        assert!(v.get(key).is_some(), "{key} missing in {v}");
    }
    assert_eq!(v["users_evaluated"], 30);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 31);

    let again = ws.eval(&data, &ckpt, &[]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn oversized_k_evaluates_nobody_with_warning() {
    let ws = Workspace::new();
    let data = ws.generate("log.tsv", "4");
    let ckpt = ws.path("m.bin");
    assert_eq!(
        ws.train(&data, &ckpt, &["--epochs", "0"]).status.code(),
        Some(0)
    );
    let out = ws.eval(&data, &ckpt, &["--k", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["users_evaluated"], 0);
    assert!(v["warning"].is_string());
}

#[test]
fn minus_mode_skips_adaptation() {
    let ws = Workspace::new();
    let data = ws.generate("log.tsv", "5");
    let ckpt = ws.path("m.bin");
    assert_eq!(
        ws.train(&data, &ckpt, &["--mode", "metatl-minus"])
            .status
            .code(),
        Some(0)
    );
    let minus = stdout_json(&ws.eval(&data, &ckpt, &["--mode", "metatl-minus"]));
    let zero_steps = stdout_json(&ws.eval(&data, &ckpt, &["--inner-steps", "0"]));
    let adapted = stdout_json(&ws.eval(&data, &ckpt, &["--inner-steps", "5", "--task-lr", "0.5"]));
    assert_eq!(minus, zero_steps);
    assert_ne!(minus["mrr"], adapted["mrr"]);
}

#[test]
fn incompatible_checkpoint_exits_3() {
    let ws = Workspace::new();
    let data = ws.generate("log.tsv", "6");
    let ckpt = ws.path("m.bin");
    assert_eq!(
        ws.train(&data, &ckpt, &["--epochs", "0"]).status.code(),
        Some(0)
    );
    assert_eq!(
        ws.eval(&data, &ckpt, &["--dim", "16"]).status.code(),
        Some(3)
    );

    let garbage = ws.path("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(ws.eval(&data, &garbage, &[]).status.code(), Some(3));

    let other = ws.path("other.tsv");
    let out = metatl(&[
        "gen",
        "--n-items",
        "30",
        "--n-train-users",
        "200",
        "--output",
        path_str(&other),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(ws.eval(&other, &ckpt, &[]).status.code(), Some(3));
}

#[test]
fn gen_is_deterministic_and_validates() {
    let ws = Workspace::new();
    let a = ws.generate("a.tsv", "7");
    let b = ws.generate("b.tsv", "7");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let out = metatl(&["gen", "--n-items", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let ws = Workspace::new();
    let cfg = ws.path("run.conf");
    std::fs::write(
        &cfg,
        "# small run\nn_items = 12\nn-train-users = 3\nn_test_users = 2\nseed = 1\n",
    )
    .unwrap();
    let out = metatl(&[
        "gen",
        "--config",
        path_str(&cfg),
        "--seq-len-min",
        "4",
        "--seq-len-max",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().lines().count(),
        5 * 4
    );

    std::fs::write(&cfg, "n_items = twelve\n").unwrap();
    let out = metatl(&["gen", "--config", path_str(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn checkgrad_prints_pass_line() {
    let out = metatl(&["checkgrad", "--dim", "4", "--trials", "100"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("PASS") && text.contains("max_rel_error"),
        "{text}"
    );
}

#[test]
fn second_order_is_rejected() {
    let out = metatl(&["checkgrad", "--second-order", "true"]);
    assert_eq!(out.status.code(), Some(2));
}
