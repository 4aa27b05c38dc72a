//! Smoke tests for the `flaudit` binary: each subcommand runs on a
//! miniature config and leaves the promised files behind.

use std::path::Path;
use std::process::Command;

fn flaudit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flaudit"))
}

fn write_micro_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("micro.json");
    std::fs::write(
        &path,
        r#"{
            "name": "cli-micro",
            "seed": 11,
            "dim": 2,
            "users": 4,
            "subjects_per_user": 2,
            "items_per_user": 40,
            "pool_per_class": 20,
            "hidden": [4],
            "rounds": 2,
            "batch_size": 16,
            "validation_subject_count": 1,
            "attack_samples_per_subject": 8,
            "eval_items": 60,
            "allow_custom": true
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn run_produces_report_and_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = dir.path().join("run");
    let result = flaudit()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(result.status.success(), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    assert!(stdout.contains("final accuracy"), "stdout: {stdout}");
    assert!(stdout.contains("loss_threshold"), "stdout: {stdout}");
    assert!(out.join("report.json").exists());
    assert!(out.join("per_round.csv").exists());
}

#[test]
fn train_then_attack_round_trips_through_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = dir.path().join("trained");

    let trained = flaudit()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(trained.status.success(), "stderr: {}", String::from_utf8_lossy(&trained.stderr));
    assert!(out.join("snapshots").join("round_0").exists());
    assert!(out.join("snapshots").join("round_2").exists());
    assert!(out.join("train_log.csv").exists());

    let attacked = flaudit()
        .args(["attack", "--config"])
        .arg(out.join("config.json"))
        .args(["--snapshots"])
        .arg(out.join("snapshots"))
        .args(["--out"])
        .arg(out.join("audit"))
        .args(["--attack", "loss-threshold"])
        .output()
        .unwrap();
    assert!(attacked.status.success(), "stderr: {}", String::from_utf8_lossy(&attacked.stderr));
    assert!(out.join("audit").join("attacks.json").exists());
    assert!(out.join("audit").join("loss_threshold_subjects.csv").exists());
    // Only the requested attack is written.
    assert!(!out.join("audit").join("loss_across_rounds_subjects.csv").exists());
}

#[test]
fn gen_saves_a_loadable_federation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = dir.path().join("fed");
    let result = flaudit()
        .args(["gen", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(result.status.success(), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    let fed = flaudit_core::synth::Federation::load(&out.join("federation.fed")).unwrap();
    assert_eq!(fed.users.len(), 4);
    assert_eq!(fed.dim, 2);
}

#[test]
fn grid_subcommand_sweeps_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("grid.json");
    std::fs::write(
        &spec_path,
        r#"{
            "base": {
                "seed": 3, "dim": 2, "users": 4, "subjects_per_user": 2,
                "items_per_user": 40, "pool_per_class": 20, "hidden": [4],
                "rounds": 2, "batch_size": 16, "validation_subject_count": 1,
                "attack_samples_per_subject": 8, "eval_items": 60,
                "allow_custom": true
            },
            "dims": [2],
            "sampling": [{"kind": "standard"}, {"kind": "dirichlet_process", "alpha": 1.0}],
            "hidden": [[4]],
            "items_per_user": [40]
        }"#,
    )
    .unwrap();
    let out = dir.path().join("sweep");
    let result = flaudit()
        .args(["grid", "--config"])
        .arg(&spec_path)
        .args(["--out"])
        .arg(&out)
        .args(["--parallelism", "2"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(result.status.success(), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    assert!(out.join("grid.csv").exists());
    assert!(stdout.contains("pearson"), "stdout: {stdout}");

    // `report` rebuilds the aggregate from what's on disk.
    let rebuilt = flaudit()
        .args(["report", "--config"])
        .arg(&spec_path)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&rebuilt.stdout);
    assert!(rebuilt.status.success());
    assert!(stdout.contains("2 finished reports"), "stdout: {stdout}");
}

#[test]
fn invalid_config_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"dim": 7}"#).unwrap();
    let result = flaudit()
        .args(["run", "--config"])
        .arg(&path)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("outside studied set"), "stderr: {stderr}");
}
