//! End-to-end pipeline: generate a federation, train it, audit it with both
//! attacks, and assemble a structured report.

use std::time::Instant;

use flaudit_attacks::{
    collect_traces, lar_attack, lar_score, lt_attack, lt_count, round_sums, Metrics, SubjectTrace,
};
use flaudit_core::accountant::{PrivacySpent, RdpAccountant};
use flaudit_core::dp::DpGranularity;
use flaudit_core::fed::{accuracy_on, train_federation, FedRun};
use flaudit_core::rng::stream;
use flaudit_core::synth::{build_federation, index_points, Federation};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LossThreshold,
    LossAcrossRounds,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One test subject's final-round outcome.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: u32,
    pub score: usize,
    pub verdict: bool,
    pub truth: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    /// Loss cutoff; absent for the across-rounds attack.
    pub lambda: Option<f64>,
    /// Count cutoff: tau_c for loss-threshold, tau_r for across-rounds.
    pub tau: usize,
    pub validation: Metrics,
    pub test: Metrics,
    /// Test-set metrics with thresholds re-tuned at each round.
    pub per_round: Vec<RoundMetrics>,
    pub per_subject: Vec<SubjectRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub effective_seed: u64,
    pub members: usize,
    pub nonmembers: usize,
    /// Auditor-known subjects per class used for threshold tuning.
    pub validation_subjects: usize,
    pub train_loss_per_round: Vec<f64>,
    /// accuracy_per_round[r] evaluates the snapshot after r rounds.
    pub accuracy_per_round: Vec<f64>,
    pub final_accuracy: f64,
    pub lt: AttackReport,
    pub lar: AttackReport,
    pub privacy: Option<PrivacySpent>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    /// Everything the run determines, minus wall-clock time.
    pub fn comparable(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("report is an object").remove("wall_clock_secs");
        v
    }
}

/// Subject-disjoint auditor split: `count` members and `count` non-members
/// are revealed for tuning; every other attack subject is test material.
pub fn split_validation(
    traces: &[SubjectTrace],
    count: usize,
    seed: u64,
) -> Result<(Vec<SubjectTrace>, Vec<SubjectTrace>)> {
    let mut member_idx: Vec<usize> = Vec::new();
    let mut non_idx: Vec<usize> = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        if t.member {
            member_idx.push(i);
        } else {
            non_idx.push(i);
        }
    }
    let (m, n) = (member_idx.len(), non_idx.len());
    if count == 0 {
        return Err(HarnessError::Config("validation needs at least 1 subject per class".into()));
    }
    if count >= m.min(n) {
        return Err(HarnessError::Config(format!(
            "validation_subject_count {count} leaves no test subjects (members {m}, non-members {n})"
        )));
    }
    if 4 * count >= m + n {
        return Err(HarnessError::Config(format!(
            "validation_subject_count {count} claims over half the {} attack subjects",
            m + n
        )));
    }
    let mut rng = stream(seed, "valsplit", &[]);
    member_idx.shuffle(&mut rng);
    non_idx.shuffle(&mut rng);
    let chosen: std::collections::HashSet<usize> =
        member_idx[..count].iter().chain(non_idx[..count].iter()).copied().collect();
    let mut validation = Vec::with_capacity(2 * count);
    let mut test = Vec::with_capacity(traces.len() - 2 * count);
    for (i, t) in traces.iter().enumerate() {
        if chosen.contains(&i) {
            validation.push(t.clone());
        } else {
            test.push(t.clone());
        }
    }
    Ok((validation, test))
}

pub fn attack_report(
    kind: AttackKind,
    validation: &[SubjectTrace],
    test: &[SubjectTrace],
    rounds: usize,
    obj: flaudit_attacks::TuneObjective,
) -> AttackReport {
    let per_round: Vec<RoundMetrics> = (0..=rounds)
        .map(|r| {
            let m = match kind {
                AttackKind::LossThreshold => lt_attack(validation, test, r, obj).1.test,
                AttackKind::LossAcrossRounds => lar_attack(validation, test, r, obj).1.test,
            };
            RoundMetrics { round: r, f1: m.f1, precision: m.precision, recall: m.recall }
        })
        .collect();
    let (lambda, tau, outcome) = match kind {
        AttackKind::LossThreshold => {
            let (p, o) = lt_attack(validation, test, rounds, obj);
            (Some(p.lambda), p.tau_c, o)
        }
        AttackKind::LossAcrossRounds => {
            let (p, o) = lar_attack(validation, test, rounds, obj);
            (None, p.tau_r, o)
        }
    };
    let per_subject = test
        .iter()
        .map(|t| {
            let score = match kind {
                AttackKind::LossThreshold => lt_count(&t.losses[rounds], lambda.unwrap()),
                AttackKind::LossAcrossRounds => lar_score(&round_sums(&t.losses[..=rounds])),
            };
            let verdict = score >= tau;
            SubjectRow { subject: t.subject, score, verdict, truth: t.member }
        })
        .collect();
    AttackReport {
        kind,
        lambda,
        tau,
        validation: outcome.validation,
        test: outcome.test,
        per_round,
        per_subject,
    }
}

fn privacy_report(cfg: &ExperimentConfig) -> Result<Option<PrivacySpent>> {
    let Some(dp) = cfg.dp.as_ref().filter(|p| !p.is_off() && p.sigma > 0.0) else {
        return Ok(None);
    };
    let (q, steps) = match dp.granularity {
        DpGranularity::Item | DpGranularity::Subject => {
            let q = (cfg.batch_size as f64 / cfg.items_per_user as f64).min(1.0);
            let batches = cfg.items_per_user.div_ceil(cfg.batch_size);
            (q, cfg.rounds * cfg.local_epochs * batches)
        }
        DpGranularity::User => (cfg.participation, cfg.rounds),
    };
    if steps == 0 {
        return Ok(None);
    }
    let spent = RdpAccountant::new(q, dp.sigma)?.epsilon(steps as u64, dp.delta)?;
    Ok(Some(spent))
}

/// Train on the prepared federation and audit it. Split out from
/// [`run_experiment`] so callers that already hold the federation (or want
/// the traces back) can reuse it.
pub fn run_on_federation(
    cfg: &ExperimentConfig,
    fed: &Federation,
) -> Result<(ExperimentReport, FedRun, Vec<SubjectTrace>)> {
    let started = Instant::now();
    let eff = cfg.effective_seed();
    let run = train_federation(fed, &cfg.mlp_spec(), &cfg.train_config(), eff)?;

    let eval_index = index_points(&fed.eval_points);
    let accuracy_per_round: Vec<f64> =
        run.snapshots.iter().map(|m| accuracy_on(m, &fed.eval_points, &eval_index)).collect();
    let final_accuracy = *accuracy_per_round.last().expect("at least the initial snapshot");

    let traces = collect_traces(&run.snapshots, &fed.attack);
    let (validation, test) = split_validation(&traces, cfg.validation_subject_count, eff)?;

    let lt = attack_report(AttackKind::LossThreshold, &validation, &test, cfg.rounds, cfg.tune_objective);
    let lar =
        attack_report(AttackKind::LossAcrossRounds, &validation, &test, cfg.rounds, cfg.tune_objective);

    let members = traces.iter().filter(|t| t.member).count();
    let report = ExperimentReport {
        name: cfg.name.clone(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        effective_seed: eff,
        members,
        nonmembers: traces.len() - members,
        validation_subjects: cfg.validation_subject_count,
        train_loss_per_round: run.round_logs.iter().map(|l| l.mean_train_loss).collect(),
        accuracy_per_round,
        final_accuracy,
        lt,
        lar,
        privacy: privacy_report(cfg)?,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, run, traces))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let fed = build_federation(&cfg.gen_params(), cfg.effective_seed())?;
    let (report, _, _) = run_on_federation(cfg, &fed)?;
    Ok(report)
}
