//! End-to-end tests of the command-line surface: the full pipeline on a tiny
//! synthetic config, plus exit codes for the documented failure classes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsedistill"))
}

fn tiny_config(out: &Path) -> String {
    format!(
        "[dataset]\n\
         kind = synthetic\n\
         classes = 3\n\
         per_class = 30\n\
         shape = 1x8x8\n\
         delta = 4.0\n\
         seed = 0\n\
         \n\
         [models]\n\
         teacher = cnn-teacher\n\
         student = cnn-small\n\
         \n\
         [distill.finetune]\n\
         temperature = 3.0\n\
         alpha = 0.7\n\
         beta = 0.5\n\
         \n\
         [distill.score]\n\
         temperature = 5.0\n\
         alpha = 0.7\n\
         beta = 0.5\n\
         gamma = 0.9\n\
         epochs = 1\n\
         \n\
         [distill.retrain]\n\
         temperature = 3.0\n\
         alpha = 0.7\n\
         beta = 0.5\n\
         \n\
         [prune]\n\
         sparsity = 0.5,0.8\n\
         \n\
         [optim]\n\
         lr = 0.02\n\
         batch_size = 16\n\
         teacher_epochs = 2\n\
         finetune_epochs = 2\n\
         retrain_epochs = 2\n\
         warmup_epochs = 1\n\
         patience = 5\n\
         \n\
         [run]\n\
         seeds = 0,1\n\
         out = {}\n\
         precision = 32\n\
         efficiency = false\n",
        out.display()
    )
}

fn run_ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, tiny_config(&out)).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    run_ok(bin().args(["--config", cfg, "train-teacher"]).output().unwrap());
    let teacher = out.join("teacher.ckpt");
    assert!(teacher.exists());

    run_ok(
        bin()
            .args(["--config", cfg, "distill", "--teacher"])
            .arg(&teacher)
            .output()
            .unwrap(),
    );
    let student = out.join("student-dense-s0.ckpt");
    assert!(student.exists());

    run_ok(
        bin()
            .args(["--config", cfg, "score", "--teacher"])
            .arg(&teacher)
            .arg("--student")
            .arg(&student)
            .output()
            .unwrap(),
    );
    let scores = out.join("scores-s0.sdis");
    assert!(scores.exists());

    run_ok(
        bin()
            .args(["--config", cfg, "prune", "--student"])
            .arg(&student)
            .arg("--scores")
            .arg(&scores)
            .args(["--sparsity", "0.8"])
            .output()
            .unwrap(),
    );
    let pruned = out.join("pruned-s0-p0.8.ckpt");
    let mask = out.join("mask-s0-p0.8.sdmk");
    assert!(pruned.exists() && mask.exists());

    run_ok(
        bin()
            .args(["--config", cfg, "retrain", "--pruned"])
            .arg(&pruned)
            .arg("--mask")
            .arg(&mask)
            .args(["--mode", "kd", "--teacher"])
            .arg(&teacher)
            .output()
            .unwrap(),
    );
    assert!(out.join("records.csv").exists());

    let eval_out = run_ok(
        bin()
            .args(["--config", cfg, "eval", "--ckpt"])
            .arg(&pruned)
            .args(["--split", "test"])
            .output()
            .unwrap(),
    );
    assert!(eval_out.contains("accuracy on test"), "{eval_out}");

    // Metrics CSV has the mandated header.
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "run_id,phase,epoch,train_loss,val_loss,val_acc,sparsity,wall_clock_s"
    ));

    // Plain retraining without --teacher also works.
    run_ok(
        bin()
            .args(["--config", cfg, "retrain", "--pruned"])
            .arg(&pruned)
            .arg("--mask")
            .arg(&mask)
            .args(["--mode", "plain"])
            .output()
            .unwrap(),
    );
}

#[test]
fn compare_produces_full_grid_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, tiny_config(&out)).unwrap();

    let text = run_ok(
        bin()
            .args(["--config", cfg_path.to_str().unwrap(), "compare"])
            .output()
            .unwrap(),
    );
    assert!(text.contains("comparison finished: 16 records"), "{text}");
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    // Header + |seeds| * |sparsities| * 4 methods.
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 4);
    for method in ["ours-kd-T3", "ours-no-kd", "lth-oneshot", "magnitude-oneshot"] {
        assert!(csv.contains(method), "missing {method} in csv");
    }
    assert!(out.join("compare.txt").exists());
}

#[test]
fn exit_codes_match_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, tiny_config(&out)).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    // 1: config errors (bad config file, missing --config).
    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "[dataset]\nkind = nonsense\n").unwrap();
    let status = bin()
        .args(["--config", bad_cfg.to_str().unwrap(), "train-teacher"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = bin().args(["train-teacher"]).output().unwrap();
    assert_eq!(status.status.code(), Some(1));

    // 4: missing prerequisite artifact, error names the file.
    let missing = dir.path().join("nope.ckpt");
    let out4 = bin()
        .args(["--config", cfg, "distill", "--teacher"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out4.status.code(), Some(4));
    assert!(
        String::from_utf8_lossy(&out4.stderr).contains("nope.ckpt"),
        "{}",
        String::from_utf8_lossy(&out4.stderr)
    );

    // 2: data/format error (corrupt checkpoint).
    run_ok(bin().args(["--config", cfg, "train-teacher"]).output().unwrap());
    let teacher = out.join("teacher.ckpt");
    let mut bytes = std::fs::read(&teacher).unwrap();
    bytes[0] ^= 0xFF;
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, bytes).unwrap();
    let out2 = bin()
        .args(["--config", cfg, "eval", "--ckpt"])
        .arg(&corrupt)
        .output()
        .unwrap();
    assert_eq!(out2.status.code(), Some(2));

    // 3: numerical failure (an absurd learning rate blows the loss up).
    let nan_cfg = dir.path().join("nan.cfg");
    std::fs::write(&nan_cfg, tiny_config(&out).replace("lr = 0.02", "lr = 1e30")).unwrap();
    let out3 = bin()
        .args(["--config", nan_cfg.to_str().unwrap(), "train-teacher"])
        .output()
        .unwrap();
    assert_eq!(out3.status.code(), Some(3), "{}", String::from_utf8_lossy(&out3.stderr));
    assert!(
        String::from_utf8_lossy(&out3.stderr).contains("batch"),
        "numerical error should name the offending batch: {}",
        String::from_utf8_lossy(&out3.stderr)
    );

    // 0 with --help.
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["train-teacher", "distill", "score", "prune", "retrain", "eval", "compare"] {
        assert!(text.contains(sub), "help missing {sub}");
    }
}

#[test]
fn compare_twice_reproduces_identical_accuracy_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    let mut accs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("cmp{run}"));
        let mut text = tiny_config(&out);
        // Shrink the grid for speed; determinism is the point here.
        text = text.replace("sparsity = 0.5,0.8", "sparsity = 0.8");
        text = text.replace("seeds = 0,1", "seeds = 0");
        std::fs::write(&cfg_path, &text).unwrap();
        run_ok(
            bin()
                .args(["--config", cfg_path.to_str().unwrap(), "compare"])
                .output()
                .unwrap(),
        );
        let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
        let table: Vec<String> = csv
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{},{}", f[0], f[2], f[3], f[4], f[7])
            })
            .collect();
        accs.push(table);
    }
    assert_eq!(accs[0], accs[1]);
}

#[test]
fn precision_64_runs_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run64");
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, tiny_config(&out)).unwrap();
    run_ok(
        bin()
            .args([
                "--config",
                cfg_path.to_str().unwrap(),
                "--precision",
                "64",
                "train-teacher",
            ])
            .output()
            .unwrap(),
    );
    assert!(out.join("teacher.ckpt").exists());
}
