//! Subject-level membership attacks.
//!
//! Both attacks see only per-sample losses from model snapshots — never
//! weights or data internals — so they apply to any model exposing a loss
//! oracle.
//!
//! * Loss-threshold: at one snapshot, count a subject's samples with loss at
//!   or below lambda; the subject is called a member when the count reaches
//!   tau_c.
//! * Loss-across-rounds: sum a subject's sample losses per snapshot and count
//!   strict drops between consecutive snapshots; the subject is called a
//!   member when the number of drops reaches tau_r.
//!
//! Thresholds are tuned on a labeled validation split by exhaustive search
//! over the discrete candidate grid, with exact rational objective comparison
//! so ties never depend on floating-point rounding. Ties prefer the smaller
//! lambda, then the smaller tau.

use serde::{Deserialize, Serialize};

use flaudit_core::model::{Mlp, Scratch};
use flaudit_core::synth::{index_points, AttackSubject};

/// Loss oracle over labeled samples; the only model access attacks get.
pub trait LossModel {
    fn loss(&self, x: &[f64], y: f64) -> f64;
}

impl LossModel for Mlp {
    fn loss(&self, x: &[f64], y: f64) -> f64 {
        let mut scratch = Scratch::new(&self.spec);
        Mlp::loss(self, x, y, &mut scratch)
    }
}

/// Per-subject loss trajectories: `losses[round][sample]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTrace {
    pub subject: u32,
    pub member: bool,
    pub losses: Vec<Vec<f64>>,
}

/// Evaluate every snapshot on every attack sample. Bit-identical samples are
/// scored once per snapshot.
pub fn collect_traces<M: LossModel>(models: &[M], subjects: &[AttackSubject]) -> Vec<SubjectTrace> {
    subjects
        .iter()
        .map(|a| {
            let index = index_points(&a.points);
            let losses = models
                .iter()
                .map(|m| {
                    let atom_losses: Vec<f64> = index
                        .reps
                        .iter()
                        .map(|&r| {
                            let p = &a.points[r as usize];
                            m.loss(&p.x, f64::from(p.y))
                        })
                        .collect();
                    (0..a.points.len())
                        .map(|i| atom_losses[index.atom_of[i] as usize])
                        .collect()
                })
                .collect();
            SubjectTrace { subject: a.subject, member: a.member, losses }
        })
        .collect()
}

// --- scores --------------------------------------------------------------------

/// Samples with loss <= lambda (inclusive).
pub fn lt_count(losses: &[f64], lambda: f64) -> usize {
    losses.iter().filter(|&&l| l <= lambda).count()
}

/// Per-round sums of sample losses over a (prefix of a) trace.
pub fn round_sums(rounds: &[Vec<f64>]) -> Vec<f64> {
    rounds.iter().map(|round| round.iter().sum()).collect()
}

/// Strict drops between consecutive round sums.
pub fn lar_score(sums: &[f64]) -> usize {
    sums.windows(2).filter(|w| w[1] < w[0]).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtParams {
    pub lambda: f64,
    pub tau_c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LarParams {
    pub tau_r: usize,
}

pub fn lt_verdict(trace: &SubjectTrace, round: usize, p: LtParams) -> bool {
    lt_count(&trace.losses[round], p.lambda) >= p.tau_c
}

/// Verdict from snapshots 0..=round.
pub fn lar_verdict(trace: &SubjectTrace, round: usize, p: LarParams) -> bool {
    let sums = round_sums(&trace.losses[..=round]);
    lar_score(&sums) >= p.tau_r
}

// --- metrics -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn from_verdicts(pairs: impl IntoIterator<Item = (bool, bool)>) -> Metrics {
        let mut m = Metrics::default();
        for (verdict, truth) in pairs {
            match (verdict, truth) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, false) => m.tn += 1,
                (false, true) => m.fn_ += 1,
            }
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        m.precision = ratio(m.tp, m.tp + m.fp);
        m.recall = ratio(m.tp, m.tp + m.fn_);
        m.f1 = ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn_);
        m.accuracy = ratio(m.tp + m.tn, m.tp + m.fp + m.tn + m.fn_);
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneObjective {
    F1,
    Accuracy,
}

/// Exact objective value as a rational; avoids float ties in tuning.
#[derive(Clone, Copy, Debug)]
struct Frac {
    num: u64,
    den: u64,
}

impl Frac {
    fn gt(self, other: Frac) -> bool {
        (self.num as u128) * (other.den as u128) > (other.num as u128) * (self.den as u128)
    }
    fn eq_frac(self, other: Frac) -> bool {
        (self.num as u128) * (other.den as u128) == (other.num as u128) * (self.den as u128)
    }
}

#[derive(Clone, Copy, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    members: u64,
    total: u64,
}

fn objective_frac(obj: TuneObjective, c: Counts) -> Frac {
    match obj {
        TuneObjective::F1 => {
            let den = 2 * c.tp + c.fp + (c.members - c.tp);
            if den == 0 {
                Frac { num: 0, den: 1 }
            } else {
                Frac { num: 2 * c.tp, den }
            }
        }
        TuneObjective::Accuracy => {
            let tn = (c.total - c.members) - c.fp;
            Frac { num: c.tp + tn, den: c.total }
        }
    }
}

/// Tune the loss-threshold attack on labeled traces at one snapshot.
///
/// The candidate grid is the set of observed per-sample losses plus midpoints
/// of adjacent distinct losses, crossed with tau_c in 1..=max sample count.
/// For a fixed tau_c the verdict of subject s flips exactly at its tau_c-th
/// smallest loss, and between consecutive flip values the confusion matrix is
/// constant — so sweeping sorted flip values visits every distinct operating
/// point, and the smallest grid lambda achieving one is either a flip value
/// or (for the all-negative point) the smallest observed loss.
pub fn tune_lt(traces: &[SubjectTrace], round: usize, obj: TuneObjective) -> LtParams {
    let max_samples = traces.iter().map(|t| t.losses[round].len()).max().unwrap_or(0);
    if max_samples == 0 {
        return LtParams { lambda: 0.0, tau_c: 1 };
    }
    let members = traces.iter().filter(|t| t.member).count() as u64;
    let total = traces.len() as u64;
    let sorted: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            let mut l = t.losses[round].clone();
            l.sort_by(f64::total_cmp);
            l
        })
        .collect();
    let global_min = sorted
        .iter()
        .filter_map(|l| l.first().copied())
        .fold(f64::INFINITY, f64::min);

    let mut best: Option<(Frac, f64, usize)> = None;
    let consider = |frac: Frac, lambda: f64, tau: usize, best: &mut Option<(Frac, f64, usize)>| {
        let better = match best {
            None => true,
            Some((bf, bl, _)) => frac.gt(*bf) || (frac.eq_frac(*bf) && lambda < *bl),
        };
        if better {
            *best = Some((frac, lambda, tau));
        }
    };

    let mut flips: Vec<(f64, bool)> = Vec::with_capacity(traces.len());
    for tau in 1..=max_samples {
        flips.clear();
        for (t, l) in traces.iter().zip(&sorted) {
            if l.len() >= tau {
                flips.push((l[tau - 1], t.member));
            }
        }
        flips.sort_by(|a, b| a.0.total_cmp(&b.0));

        // All-negative operating point, reachable inside the grid whenever
        // some observed loss sits below every flip value.
        let mut c = Counts { tp: 0, fp: 0, members, total };
        if flips.first().map_or(true, |f| global_min < f.0) {
            consider(objective_frac(obj, c), global_min, tau, &mut best);
        }

        let mut i = 0;
        while i < flips.len() {
            let v = flips[i].0;
            while i < flips.len() && flips[i].0 == v {
                if flips[i].1 {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
                i += 1;
            }
            consider(objective_frac(obj, c), v, tau, &mut best);
        }
    }
    let (_, lambda, tau_c) = best.expect("at least one candidate exists");
    LtParams { lambda, tau_c }
}

/// Tune the across-rounds attack on labeled traces over snapshots 0..=round.
pub fn tune_lar(traces: &[SubjectTrace], round: usize, obj: TuneObjective) -> LarParams {
    let members = traces.iter().filter(|t| t.member).count() as u64;
    let total = traces.len() as u64;
    let scores: Vec<(usize, bool)> = traces
        .iter()
        .map(|t| {
            (lar_score(&round_sums(&t.losses[..=round])), t.member)
        })
        .collect();
    let mut best: Option<(Frac, usize)> = None;
    // tau = 0 is the all-member verdict; scores range up to the round count.
    for tau in 0..=round {
        let mut c = Counts { tp: 0, fp: 0, members, total };
        for &(s, member) in &scores {
            if s >= tau {
                if member {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
        }
        let frac = objective_frac(obj, c);
        let better = match best {
            None => true,
            Some((bf, _)) => frac.gt(bf),
        };
        if better {
            best = Some((frac, tau));
        }
    }
    LarParams { tau_r: best.expect("tau grid is non-empty").1 }
}

// --- end-to-end helpers ----------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AttackOutcome {
    pub validation: Metrics,
    pub test: Metrics,
}

pub fn lt_attack(
    validation: &[SubjectTrace],
    test: &[SubjectTrace],
    round: usize,
    obj: TuneObjective,
) -> (LtParams, AttackOutcome) {
    let params = tune_lt(validation, round, obj);
    let eval = |ts: &[SubjectTrace]| {
        Metrics::from_verdicts(ts.iter().map(|t| (lt_verdict(t, round, params), t.member)))
    };
    (params, AttackOutcome { validation: eval(validation), test: eval(test) })
}

pub fn lar_attack(
    validation: &[SubjectTrace],
    test: &[SubjectTrace],
    round: usize,
    obj: TuneObjective,
) -> (LarParams, AttackOutcome) {
    let params = tune_lar(validation, round, obj);
    let eval = |ts: &[SubjectTrace]| {
        Metrics::from_verdicts(ts.iter().map(|t| (lar_verdict(t, round, params), t.member)))
    };
    (params, AttackOutcome { validation: eval(validation), test: eval(test) })
}
