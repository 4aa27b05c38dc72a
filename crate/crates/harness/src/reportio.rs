//! Report persistence: the full-precision JSON report plus flat CSV views.
//!
//! CSV floats are rounded to six decimals for spreadsheet diffing; anything
//! downstream of the numbers should read `report.json`.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::experiment::{AttackReport, ExperimentReport};

/// Write-then-rename so a crashed run never leaves a half-written report
/// (grid resumption treats an existing file as a finished config).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv6(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

pub fn write_attack_csvs(dir: &Path, stem: &str, report: &AttackReport) -> Result<()> {
    let mut subjects = csv::Writer::from_writer(Vec::new());
    subjects.write_record(["subject_id", "score", "verdict", "truth"])?;
    for row in &report.per_subject {
        subjects.write_record([
            row.subject.to_string(),
            row.score.to_string(),
            row.verdict.to_string(),
            row.truth.to_string(),
        ])?;
    }
    write_atomic(&dir.join(format!("{stem}_subjects.csv")), &subjects.into_inner().expect("vec"))?;

    let mut rounds = csv::Writer::from_writer(Vec::new());
    rounds.write_record(["round", "f1", "precision", "recall"])?;
    for m in &report.per_round {
        rounds.write_record([m.round.to_string(), csv6(m.f1), csv6(m.precision), csv6(m.recall)])?;
    }
    write_atomic(&dir.join(format!("{stem}_rounds.csv")), &rounds.into_inner().expect("vec"))?;
    Ok(())
}

/// Persist a finished experiment under `dir`: report.json, per_round.csv,
/// and per-attack subject/round CSVs.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut per_round = csv::Writer::from_writer(Vec::new());
    per_round.write_record(["round", "train_loss", "test_acc", "f1_lt", "f1_lar"])?;
    for (r, acc) in report.accuracy_per_round.iter().enumerate() {
        // Round 0 is the untrained snapshot; it has no training loss.
        let train_loss =
            if r == 0 { String::new() } else { csv6(report.train_loss_per_round[r - 1]) };
        per_round.write_record([
            r.to_string(),
            train_loss,
            csv6(*acc),
            csv6(report.lt.per_round[r].f1),
            csv6(report.lar.per_round[r].f1),
        ])?;
    }
    write_atomic(&dir.join("per_round.csv"), &per_round.into_inner().expect("vec"))?;

    write_attack_csvs(dir, "loss_threshold", &report.lt)?;
    write_attack_csvs(dir, "loss_across_rounds", &report.lar)?;

    // Last: its presence marks the config as complete.
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    Ok(serde_json::from_str(&text)?)
}
