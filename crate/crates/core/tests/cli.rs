use std::path::Path;
use std::process::{Command, Output};

use mtseg::trainer::Reports;

fn mtseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A two-epoch smoke run shared by the eval and report tests.
fn smoke_run(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--preset", "synth-smoke", "--out", p(dir), "--set", "train.schedule.total_epochs=2"];
    for e in extra {
        args.extend(["--set", e]);
    }
    let o = mtseg(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn paper_presets_echo_their_hyperparameters() {
    let o = mtseg(&["train", "--preset", "paper-semi", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    for needle in ["lambda=0.0006", "epochs=350", "ema_alpha=0.99->0.999@50", "w_max=2.9", "w_rampup=100", "lr=0.0006"] {
        assert!(s.contains(needle), "missing {needle} in {s}");
    }
    let s = stdout(&mtseg(&["train", "--preset", "paper-supervised", "--dry-run"]));
    assert!(s.contains("lambda=0.0008") && s.contains("epochs=1600") && s.contains("mode=Supervised"));
}

#[test]
fn config_errors_exit_2() {
    let o = mtseg(&["train", "--preset", "no-such-preset", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown preset"));

    let o = mtseg(&["train", "--preset", "paper-semi", "--set", "train.schedule.warp=1", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("partial.toml");
    std::fs::write(&cfg, "[train]\nmode = \"supervised\"\nbogus = 1\n").unwrap();
    let o = mtseg(&["train", "--config", p(&cfg), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    // one aggregated message naming several missing keys and the unknown one
    assert!(err.contains("train.l2") && err.contains("train.batch_size") && err.contains("train.bogus"), "{err}");
}

#[test]
fn train_writes_run_directory_and_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    smoke_run(&run, &[]);
    for f in ["config.toml", "train_log.csv", "final.safetensors", "best.safetensors", "latest.safetensors", "loss.svg", "val_dice.svg", "test_metrics.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    let again = mtseg(&["train", "--config", p(&run.join("config.toml")), "--dry-run"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stdout(&again).ends_with(&snapshot));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = mtseg(&[
        "train",
        "--preset",
        "synth-smoke",
        "--out",
        p(&run),
        "--set",
        "train.schedule.lr_max=1e30",
        "--set",
        "train.schedule.total_epochs=2",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(run.join("divergence.json").is_file());
}

#[test]
fn eval_selects_weights() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    smoke_run(&run, &[]);
    let ckpt = run.join("final.safetensors");
    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap();

    let o = mtseg(&["eval", "--checkpoint", p(&ckpt), "--model", "student", "--out", p(&dir.path().join("s.json"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("student: Dice"));
    let o = mtseg(&["eval", "--checkpoint", p(&ckpt), "--model", "teacher", "--out", p(&dir.path().join("t.json"))]);
    assert!(stdout(&o).starts_with("teacher: Dice"));
    let o = mtseg(&["eval", "--checkpoint", p(&ckpt), "--model", "both", "--out", p(&dir.path().join("b.json"))]);
    assert_eq!(o.status.code(), Some(0));

    let both: Reports = serde_json::from_str(&read("b.json")).unwrap();
    let student: serde_json::Value = serde_json::from_str(&read("s.json")).unwrap();
    let teacher: serde_json::Value = serde_json::from_str(&read("t.json")).unwrap();
    assert_eq!(student, serde_json::to_value(both.student).unwrap());
    assert_eq!(teacher, serde_json::to_value(both.teacher).unwrap());

    let o = mtseg(&["eval", "--checkpoint", p(&dir.path().join("missing.safetensors"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_writes_deterministic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mtseg(&["synth", "--preset", "synth-smoke", "--out", p(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert!(a.join("manifest.json").is_file());
    for f in ["manifest.json", "labeled/00000_image.npy", "labeled/00000_mask.npy", "test/00003_image.npy"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = mtseg(&["synth", "--preset", "synth-smoke", "--out", p(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_builds_table() {
    let dir = tempfile::tempdir().unwrap();
    let semi = dir.path().join("semi");
    let sup = dir.path().join("sup");
    smoke_run(&semi, &[]);
    smoke_run(&sup, &["train.mode=\"supervised\"", "train.schedule.consistency_max=0", "train.eval.selection=\"student\""]);

    let out = dir.path().join("table");
    let o = mtseg(&["report", p(&sup), p(&semi), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "model,runs,Dice,Dice_std,mIoU,mIoU_std,Accuracy,Accuracy_std,Precision,Precision_std,Recall,Recall_std,Specificity,Specificity_std"
    );
    assert!(lines[1].starts_with("Supervised (this run),1,"));
    assert!(lines[2].starts_with("Semi-supervised (this run),1,"));
    assert!(lines[3].starts_with("Supervised (published),10,67.915,"));
    assert!(lines[4].starts_with("Semi-supervised (published),10,70.209,"));
    // a single run has zero spread
    for row in &lines[1..3] {
        let cells: Vec<&str> = row.split(',').collect();
        assert!(cells[3..].iter().step_by(2).all(|s| *s == "0.000"), "{row}");
    }

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(mtseg(&["report", p(&empty)]).status.code(), Some(2));

    std::fs::write(semi.join("test_metrics.json"), "{\"student\": {\"dice\": 1.0}}").unwrap();
    assert_eq!(mtseg(&["report", p(&semi)]).status.code(), Some(2));
}
