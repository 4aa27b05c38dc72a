//! FedAvg-style federated training over a synthetic federation.
//!
//! Each round: a seeded participant subset trains locally from the current
//! global model (fresh optimizer state every round), optionally under a DP
//! mechanism, and the new global model is the shard-size-weighted mean of the
//! participants' parameters. The global model is snapshotted before training
//! and after every round, so a run with R rounds yields R+1 snapshots.

use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{add_gaussian, item_clip_weights, subject_clip_weights, DpGranularity, DpParams};
use crate::error::{CoreError, Result};
use crate::linalg::{axpy, scale};
use crate::model::{GradBatch, Mlp, MlpSpec, OptState, Optimizer, Scratch};
use crate::rng::stream;
use crate::synth::{index_points, Federation, LabeledPoint, UserShard, ValueIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    /// Fraction of users drawn each round; ceil(participation * users) join.
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub dp: Option<DpParams>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RoundLog {
    pub round: usize,
    /// Mean pre-step mini-batch loss across participants.
    pub mean_train_loss: f64,
}

pub struct FedRun {
    /// snapshots[r] is the global model after r rounds; [0] is the init.
    pub snapshots: Vec<Mlp>,
    pub round_logs: Vec<RoundLog>,
}

pub fn participant_count(participation: f64, users: usize) -> usize {
    ((participation * users as f64).ceil() as usize).clamp(1, users)
}

/// Seeded participant subset for one round, ascending user order.
pub fn select_participants(seed: u64, round: u64, users: usize, participation: f64) -> Vec<usize> {
    let k = participant_count(participation, users);
    if k == users {
        return (0..users).collect();
    }
    let mut rng = stream(seed, "participate", &[round]);
    let mut picked = index_sample(&mut rng, users, k).into_vec();
    picked.sort_unstable();
    picked
}

fn effective_dp(cfg: &TrainConfig) -> Option<DpParams> {
    cfg.dp.filter(|d| !d.is_off())
}

/// Group a batch by atom id. `counts` is a zeroed scratch array over atoms;
/// it is restored to zero before returning. `present` ends sorted so the
/// accumulation order is fixed regardless of shuffle order.
fn group_batch(batch: &[u32], index: &ValueIndex, counts: &mut [u32], present: &mut Vec<u32>) {
    present.clear();
    for &pi in batch {
        let a = index.atom_of[pi as usize];
        if counts[a as usize] == 0 {
            present.push(a);
        }
        counts[a as usize] += 1;
    }
    present.sort_unstable();
}

/// Mean-of-examples batch gradient, computed per distinct value with exact
/// dyadic-free weights count/|B|. Returns the mean batch loss.
pub(crate) fn batch_gradient_plain(
    model: &Mlp,
    points: &[LabeledPoint],
    index: &ValueIndex,
    batch: &[u32],
    counts: &mut [u32],
    present: &mut Vec<u32>,
    grad: &mut [f64],
    scratch: &mut Scratch,
) -> f64 {
    group_batch(batch, index, counts, present);
    let b = batch.len() as f64;
    grad.fill(0.0);
    let mut loss = 0.0;
    for &a in present.iter() {
        let c = counts[a as usize];
        counts[a as usize] = 0;
        let rep = &points[index.reps[a as usize] as usize];
        let w = c as f64 / b;
        loss += w * model.grad_one(&rep.x, f64::from(rep.y), w, grad, scratch);
    }
    loss
}

struct LocalOutcome {
    params: Vec<f64>,
    mean_batch_loss: f64,
}

/// Reusable buffers for item/subject DP batch updates.
struct DpBatchState {
    gb: GradBatch,
    subjects: Vec<u32>,
    copies: Vec<u32>,
    weights: Vec<f64>,
}

impl DpBatchState {
    fn new(spec: &MlpSpec, cap: usize) -> DpBatchState {
        DpBatchState {
            gb: GradBatch::new(spec, cap),
            subjects: Vec::with_capacity(cap),
            copies: Vec::with_capacity(cap),
            weights: Vec::with_capacity(cap),
        }
    }
}

/// One item- or subject-level DP batch update written into `grad`:
/// clip-weighted gradient sum, Gaussian noise, mechanism divisor. Returns the
/// mean pre-step batch loss, defined exactly as in the plain path.
#[allow(clippy::too_many_arguments)]
fn dp_batch_update(
    model: &Mlp,
    points: &[LabeledPoint],
    index: &ValueIndex,
    batch: &[u32],
    p: DpParams,
    counts: &mut [u32],
    present: &mut Vec<u32>,
    st: &mut DpBatchState,
    grad: &mut [f64],
    noise_rng: &mut ChaCha8Rng,
    scratch: &mut Scratch,
) -> f64 {
    group_batch(batch, index, counts, present);
    let b = batch.len() as f64;
    st.gb.clear();
    st.subjects.clear();
    st.copies.clear();
    let mut loss = 0.0;
    for &a in present.iter() {
        let c = counts[a as usize];
        counts[a as usize] = 0;
        let rep = &points[index.reps[a as usize] as usize];
        loss += c as f64 / b * st.gb.push(model, &rep.x, f64::from(rep.y), scratch);
        st.subjects.push(rep.subject);
        st.copies.push(c);
    }
    let DpBatchState { gb, subjects, copies, weights } = st;
    let divisor = match p.granularity {
        DpGranularity::Item => item_clip_weights(copies, p.clip, |i| gb.grad_dot(i, i), weights),
        _ => subject_clip_weights(subjects, copies, p.clip, |i, j| gb.grad_dot(i, j), weights),
    };
    grad.fill(0.0);
    gb.add_weighted(weights, grad);
    add_gaussian(grad, p.sigma * p.clip, noise_rng);
    scale(grad, 1.0 / divisor);
    loss
}

fn local_train(
    global: &Mlp,
    shard: &UserShard,
    index: &ValueIndex,
    cfg: &TrainConfig,
    master: u64,
    round: u64,
    user: u64,
) -> LocalOutcome {
    let n = shard.points.len();
    if n == 0 {
        return LocalOutcome { params: global.params.clone(), mean_batch_loss: 0.0 };
    }
    let mut model = global.clone();
    let mut scratch = Scratch::new(&model.spec);
    let n_params = model.num_params();
    let mut opt_state = OptState::new(n_params);
    let mut data_rng = stream(master, "client", &[round, user]);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut grad = vec![0.0; n_params];
    let mut counts = vec![0u32; index.reps.len()];
    let mut present: Vec<u32> = Vec::new();
    let dp = effective_dp(cfg);
    let per_batch_dp = matches!(dp, Some(p) if p.granularity != DpGranularity::User);
    let mut dp_state = per_batch_dp
        .then(|| DpBatchState::new(&model.spec, cfg.batch_size.min(index.reps.len()).max(1)));
    let mut loss_sum = 0.0;
    let mut n_batches = 0u64;
    let mut batch_counter = 0u64;

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut data_rng);
        for batch in order.chunks(cfg.batch_size) {
            let batch_loss = match dp {
                Some(p) if p.granularity != DpGranularity::User => {
                    let st = dp_state.as_mut().expect("allocated when per-batch DP is on");
                    let mut noise_rng = stream(master, "noise", &[round, user, batch_counter]);
                    let loss = dp_batch_update(
                        &model,
                        &shard.points,
                        index,
                        batch,
                        p,
                        &mut counts,
                        &mut present,
                        st,
                        &mut grad,
                        &mut noise_rng,
                        &mut scratch,
                    );
                    opt_state.step(&cfg.optimizer, &mut model.params, &grad);
                    loss
                }
                // Plain FedAvg step; user-level DP applies to the round delta.
                _ => {
                    let loss = batch_gradient_plain(
                        &model,
                        &shard.points,
                        index,
                        batch,
                        &mut counts,
                        &mut present,
                        &mut grad,
                        &mut scratch,
                    );
                    opt_state.step(&cfg.optimizer, &mut model.params, &grad);
                    loss
                }
            };
            loss_sum += batch_loss;
            n_batches += 1;
            batch_counter += 1;
        }
    }

    if let Some(p) = dp {
        if p.granularity == DpGranularity::User {
            let mut delta: Vec<f64> =
                model.params.iter().zip(&global.params).map(|(a, b)| a - b).collect();
            let mut noise_rng = stream(master, "user_noise", &[round, user]);
            crate::dp::privatize_user_delta(&mut delta, p.clip, p.sigma, &mut noise_rng);
            for ((out, g), d) in model.params.iter_mut().zip(&global.params).zip(&delta) {
                *out = g + d;
            }
        }
    }

    LocalOutcome { params: model.params, mean_batch_loss: loss_sum / n_batches as f64 }
}

pub fn train_federation(
    fed: &Federation,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FedRun> {
    if spec.input_dim != fed.dim {
        return Err(CoreError::Invalid(format!(
            "model input dim {} != federation dim {}",
            spec.input_dim, fed.dim
        )));
    }
    // rounds == 0 is legal: the run is just the initial model.
    if cfg.batch_size == 0 || cfg.local_epochs == 0 {
        return Err(CoreError::Invalid("batch_size and local_epochs must be positive".into()));
    }
    if !(cfg.participation > 0.0 && cfg.participation <= 1.0) {
        return Err(CoreError::Invalid("participation must be in (0, 1]".into()));
    }
    if let Some(p) = cfg.dp {
        if !p.is_off() && !(p.clip > 0.0) {
            return Err(CoreError::Invalid("dp clip must be positive".into()));
        }
        if p.sigma > 0.0 && !p.clip.is_finite() {
            return Err(CoreError::Invalid("dp noise needs a finite clip bound".into()));
        }
    }

    let indices: Vec<ValueIndex> = fed.users.iter().map(|u| index_points(&u.points)).collect();
    let mut global = Mlp::init(spec.clone(), &mut stream(seed, "init", &[]));
    let mut snapshots = Vec::with_capacity(cfg.rounds + 1);
    snapshots.push(global.clone());
    let mut round_logs = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let participants =
            select_participants(seed, round as u64, fed.users.len(), cfg.participation);
        let total_points: usize = participants.iter().map(|&u| fed.users[u].points.len()).sum();
        let mut agg = vec![0.0; global.num_params()];
        let mut loss_acc = 0.0;
        for &u in &participants {
            let out = local_train(
                &global,
                &fed.users[u],
                &indices[u],
                cfg,
                seed,
                round as u64,
                u as u64,
            );
            let w = fed.users[u].points.len() as f64 / total_points as f64;
            axpy(&mut agg, w, &out.params);
            loss_acc += out.mean_batch_loss;
        }
        global.params.copy_from_slice(&agg);
        round_logs.push(RoundLog {
            round: round + 1,
            mean_train_loss: loss_acc / participants.len() as f64,
        });
        snapshots.push(global.clone());
    }

    Ok(FedRun { snapshots, round_logs })
}

/// Classification accuracy over a point set, computed per distinct value.
pub fn accuracy_on(model: &Mlp, points: &[LabeledPoint], index: &ValueIndex) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut scratch = Scratch::new(&model.spec);
    let mut correct = 0u64;
    for (ai, &rep) in index.reps.iter().enumerate() {
        let p = &points[rep as usize];
        if model.predict(&p.x, &mut scratch) == p.y {
            correct += u64::from(index.counts[ai]);
        }
    }
    correct as f64 / points.len() as f64
}

impl FedRun {
    /// Write `round_{i}` checkpoint files.
    pub fn save_snapshots(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, m) in self.snapshots.iter().enumerate() {
            m.save(&dir.join(format!("round_{i}")))?;
        }
        Ok(())
    }

    /// Load `round_0..` until the first missing file.
    pub fn load_snapshots(dir: &Path) -> Result<Vec<Mlp>> {
        let mut out = Vec::new();
        loop {
            let path = dir.join(format!("round_{}", out.len()));
            if !path.exists() {
                break;
            }
            out.push(Mlp::load(&path)?);
        }
        if out.is_empty() {
            return Err(CoreError::Format(format!("no snapshots in {}", dir.display())));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_federation, GenParams, SubjectSampling};

    fn tiny_params(sampling: SubjectSampling, users: usize) -> GenParams {
        GenParams {
            dim: 6,
            pool_per_class: 12,
            users,
            subjects_per_user: 3,
            items_per_user: 40,
            attack_samples_per_subject: 8,
            eval_items: 30,
            sampling,
            item_level_attack: false,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            rounds: 3,
            participation: 1.0,
            local_epochs: 1,
            batch_size: 16,
            optimizer: Optimizer::adam(0.01),
            dp: None,
        }
    }

    #[test]
    fn participant_count_ceils() {
        assert_eq!(participant_count(1.0, 10), 10);
        assert_eq!(participant_count(0.3, 10), 3);
        assert_eq!(participant_count(0.25, 10), 3);
        assert_eq!(participant_count(0.01, 10), 1);
        assert_eq!(participant_count(0.5, 7), 4);
    }

    #[test]
    fn participants_are_sorted_unique_and_seeded() {
        let a = select_participants(9, 4, 20, 0.35);
        let b = select_participants(9, 4, 20, 0.35);
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        for w in a.windows(2) {
            assert!(w[0] < w[1]);
        }
        let c = select_participants(9, 5, 20, 0.35);
        assert_ne!(a, c);
    }

    #[test]
    fn snapshot_count_is_rounds_plus_one() {
        let fed = build_federation(&tiny_params(SubjectSampling::Standard, 2), 11).unwrap();
        let spec = MlpSpec { input_dim: 6, hidden: vec![4] };
        let run = train_federation(&fed, &spec, &tiny_cfg(), 5).unwrap();
        assert_eq!(run.snapshots.len(), 4);
        assert_eq!(run.round_logs.len(), 3);
        assert!(run.round_logs.iter().all(|l| l.mean_train_loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let fed = build_federation(
            &tiny_params(SubjectSampling::DirichletProcess { alpha: 1.0 }, 3),
            13,
        )
        .unwrap();
        let spec = MlpSpec { input_dim: 6, hidden: vec![5, 3] };
        let a = train_federation(&fed, &spec, &tiny_cfg(), 21).unwrap();
        let b = train_federation(&fed, &spec, &tiny_cfg(), 21).unwrap();
        for (x, y) in a.snapshots.last().unwrap().params.iter().zip(
            b.snapshots.last().unwrap().params.iter(),
        ) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = train_federation(&fed, &spec, &tiny_cfg(), 22).unwrap();
        assert_ne!(
            a.snapshots.last().unwrap().params,
            c.snapshots.last().unwrap().params
        );
    }

    #[test]
    fn single_user_aggregate_equals_local_model() {
        let fed = build_federation(&tiny_params(SubjectSampling::Standard, 1), 17).unwrap();
        let spec = MlpSpec { input_dim: 6, hidden: vec![4] };
        let cfg = TrainConfig { rounds: 1, ..tiny_cfg() };
        let run = train_federation(&fed, &spec, &cfg, 31).unwrap();

        let index = index_points(&fed.users[0].points);
        let global = Mlp::init(spec.clone(), &mut stream(31, "init", &[]));
        let local = local_train(&global, &fed.users[0], &index, &cfg, 31, 0, 0);
        for (a, b) in run.snapshots[1].params.iter().zip(&local.params) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn batch_gradient_equals_mean_of_example_gradients() {
        let fed = build_federation(
            &tiny_params(SubjectSampling::DirichletProcess { alpha: 1.0 }, 1),
            19,
        )
        .unwrap();
        let points = &fed.users[0].points;
        let index = index_points(points);
        let spec = MlpSpec { input_dim: 6, hidden: vec![5] };
        let model = Mlp::init(spec.clone(), &mut stream(3, "init", &[]));
        let mut scratch = Scratch::new(&spec);

        let batch: Vec<u32> = (0..points.len() as u32).collect();
        let mut counts = vec![0u32; index.reps.len()];
        let mut present = Vec::new();
        let mut grad = vec![0.0; model.num_params()];
        let loss = batch_gradient_plain(
            &model, points, &index, &batch, &mut counts, &mut present, &mut grad, &mut scratch,
        );

        let mut naive = vec![0.0; model.num_params()];
        let mut naive_loss = 0.0;
        for p in points.iter() {
            let mut g = vec![0.0; model.num_params()];
            naive_loss += model.grad_one(&p.x, f64::from(p.y), 1.0, &mut g, &mut scratch);
            axpy(&mut naive, 1.0 / points.len() as f64, &g);
        }
        naive_loss /= points.len() as f64;

        assert!((loss - naive_loss).abs() / naive_loss.abs().max(1e-12) < 1e-10);
        for (a, b) in grad.iter().zip(&naive) {
            let denom = a.abs().max(b.abs()).max(1e-12);
            assert!((a - b).abs() / denom < 1e-10, "grad {a} vs {b}");
        }
    }

    #[test]
    fn disabled_dp_is_bit_identical_to_plain_training() {
        let fed = build_federation(
            &tiny_params(SubjectSampling::DirichletProcess { alpha: 1.0 }, 2),
            23,
        )
        .unwrap();
        let spec = MlpSpec { input_dim: 6, hidden: vec![4] };
        let plain = train_federation(&fed, &spec, &tiny_cfg(), 41).unwrap();
        for granularity in
            [DpGranularity::Item, DpGranularity::Subject, DpGranularity::User]
        {
            let cfg = TrainConfig {
                dp: Some(DpParams {
                    granularity,
                    clip: f64::INFINITY,
                    sigma: 0.0,
                    delta: 1e-5,
                }),
                ..tiny_cfg()
            };
            let run = train_federation(&fed, &spec, &cfg, 41).unwrap();
            for (a, b) in plain
                .snapshots
                .last()
                .unwrap()
                .params
                .iter()
                .zip(run.snapshots.last().unwrap().params.iter())
            {
                assert_eq!(a.to_bits(), b.to_bits(), "granularity {granularity:?}");
            }
        }
    }

    /// Literal clip-then-aggregate: materialize every distinct example's
    /// gradient, clip (group means for subjects), sum, divide.
    fn materialized_dp_update(
        model: &Mlp,
        points: &[LabeledPoint],
        index: &ValueIndex,
        batch: &[u32],
        p: DpParams,
        scratch: &mut Scratch,
    ) -> Vec<f64> {
        use crate::dp::clip_in_place;
        use crate::linalg::scale;
        use std::collections::BTreeMap;

        let mut counts = vec![0u32; index.reps.len()];
        let mut present = Vec::new();
        group_batch(batch, index, &mut counts, &mut present);
        let n = model.num_params();
        let mut out = vec![0.0; n];
        match p.granularity {
            DpGranularity::Item => {
                for &a in &present {
                    let rep = &points[index.reps[a as usize] as usize];
                    let mut g = vec![0.0; n];
                    model.grad_one(&rep.x, f64::from(rep.y), 1.0, &mut g, scratch);
                    clip_in_place(&mut g, p.clip);
                    axpy(&mut out, f64::from(counts[a as usize]), &g);
                }
                scale(&mut out, 1.0 / batch.len() as f64);
            }
            DpGranularity::Subject => {
                let mut by_subject: BTreeMap<u32, (Vec<f64>, u64)> = BTreeMap::new();
                for &a in &present {
                    let rep = &points[index.reps[a as usize] as usize];
                    let mut g = vec![0.0; n];
                    model.grad_one(&rep.x, f64::from(rep.y), 1.0, &mut g, scratch);
                    let entry = by_subject.entry(rep.subject).or_insert((vec![0.0; n], 0));
                    axpy(&mut entry.0, f64::from(counts[a as usize]), &g);
                    entry.1 += u64::from(counts[a as usize]);
                }
                let groups = by_subject.len() as f64;
                for (_, (mut gsum, cnt)) in by_subject {
                    scale(&mut gsum, 1.0 / cnt as f64);
                    clip_in_place(&mut gsum, p.clip);
                    axpy(&mut out, 1.0, &gsum);
                }
                scale(&mut out, 1.0 / groups);
            }
            DpGranularity::User => unreachable!("per-batch mechanisms only"),
        }
        out
    }

    #[test]
    fn dp_update_matches_materialized_mechanism() {
        let fed = build_federation(
            &tiny_params(SubjectSampling::DirichletProcess { alpha: 1.0 }, 1),
            53,
        )
        .unwrap();
        let points = &fed.users[0].points;
        let index = index_points(points);
        let spec = MlpSpec { input_dim: 6, hidden: vec![5, 3] };
        let model = Mlp::init(spec.clone(), &mut stream(6, "init", &[]));
        let mut scratch = Scratch::new(&spec);
        let batch: Vec<u32> = (0..24).collect();

        for granularity in [DpGranularity::Item, DpGranularity::Subject] {
            for clip in [0.05, 1e9] {
                let p = DpParams { granularity, clip, sigma: 0.0, delta: 1e-5 };
                let mut st = DpBatchState::new(&spec, batch.len());
                let mut counts = vec![0u32; index.reps.len()];
                let mut present = Vec::new();
                let mut grad = vec![0.0; model.num_params()];
                dp_batch_update(
                    &model,
                    points,
                    &index,
                    &batch,
                    p,
                    &mut counts,
                    &mut present,
                    &mut st,
                    &mut grad,
                    &mut stream(6, "noise", &[0]),
                    &mut scratch,
                );
                let want = materialized_dp_update(&model, points, &index, &batch, p, &mut scratch);
                for (a, b) in grad.iter().zip(&want) {
                    let denom = a.abs().max(b.abs()).max(1e-12);
                    assert!(
                        (a - b).abs() / denom < 1e-9,
                        "{granularity:?} clip {clip}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn dp_update_ignores_batch_order() {
        let fed = build_federation(&tiny_params(SubjectSampling::Standard, 1), 59).unwrap();
        let points = &fed.users[0].points;
        let index = index_points(points);
        let spec = MlpSpec { input_dim: 6, hidden: vec![4] };
        let model = Mlp::init(spec.clone(), &mut stream(8, "init", &[]));
        let mut scratch = Scratch::new(&spec);
        let p = DpParams {
            granularity: DpGranularity::Subject,
            clip: 0.3,
            sigma: 0.8,
            delta: 1e-5,
        };

        let batch: Vec<u32> = (0..16).collect();
        let reversed: Vec<u32> = batch.iter().rev().copied().collect();
        let mut grads = Vec::new();
        for order in [&batch, &reversed] {
            let mut st = DpBatchState::new(&spec, order.len());
            let mut counts = vec![0u32; index.reps.len()];
            let mut present = Vec::new();
            let mut grad = vec![0.0; model.num_params()];
            dp_batch_update(
                &model,
                points,
                &index,
                order,
                p,
                &mut counts,
                &mut present,
                &mut st,
                &mut grad,
                &mut stream(8, "noise", &[7]),
                &mut scratch,
            );
            grads.push(grad);
        }
        for (a, b) in grads[0].iter().zip(&grads[1]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn replacing_one_subjects_records_moves_prenoise_sum_at_most_two_clips() {
        use crate::linalg::l2_norm;

        let spec = MlpSpec { input_dim: 3, hidden: vec![4] };
        let model = Mlp::init(spec.clone(), &mut stream(61, "init", &[]));
        let mut scratch = Scratch::new(&spec);
        let pt = |x: [f64; 3], y: u8, subject: u32| LabeledPoint { x: x.to_vec(), y, subject };
        let base =
            vec![pt([0.4, -0.2, 0.9], 1, 0), pt([-0.7, 0.3, 0.1], 0, 0)];
        let variant_a = [pt([5.0, 1.0, -2.0], 1, 1), pt([3.0, -4.0, 2.0], 0, 1)];
        let variant_b = [pt([-6.0, 2.5, 0.5], 0, 1), pt([1.5, 7.0, -3.0], 1, 1)];

        let clip = 0.05;
        let p = DpParams { granularity: DpGranularity::Subject, clip, sigma: 0.0, delta: 1e-5 };
        let mut sums = Vec::new();
        for variant in [&variant_a, &variant_b] {
            let mut points = base.clone();
            points.extend(variant.iter().cloned());
            let index = index_points(&points);
            let batch: Vec<u32> = (0..points.len() as u32).collect();
            let mut st = DpBatchState::new(&spec, batch.len());
            let mut counts = vec![0u32; index.reps.len()];
            let mut present = Vec::new();
            let mut grad = vec![0.0; model.num_params()];
            dp_batch_update(
                &model,
                &points,
                &index,
                &batch,
                p,
                &mut counts,
                &mut present,
                &mut st,
                &mut grad,
                &mut stream(61, "noise", &[0]),
                &mut scratch,
            );
            // Two distinct subjects in every variant; undo the divisor to get
            // the pre-noise sum of clipped group means.
            crate::linalg::scale(&mut grad, 2.0);
            sums.push(grad);
        }
        let diff: Vec<f64> = sums[0].iter().zip(&sums[1]).map(|(a, b)| a - b).collect();
        assert!(l2_norm(&diff) <= 2.0 * clip + 1e-12, "moved {}", l2_norm(&diff));
    }

    #[test]
    fn dp_noise_changes_results_and_is_seeded() {
        let fed = build_federation(&tiny_params(SubjectSampling::Standard, 2), 29).unwrap();
        let spec = MlpSpec { input_dim: 6, hidden: vec![4] };
        let cfg = TrainConfig {
            dp: Some(DpParams {
                granularity: DpGranularity::Subject,
                clip: 0.5,
                sigma: 1.0,
                delta: 1e-5,
            }),
            ..tiny_cfg()
        };
        let a = train_federation(&fed, &spec, &cfg, 43).unwrap();
        let b = train_federation(&fed, &spec, &cfg, 43).unwrap();
        assert_eq!(
            a.snapshots.last().unwrap().params,
            b.snapshots.last().unwrap().params
        );
        let plain = train_federation(&fed, &spec, &tiny_cfg(), 43).unwrap();
        assert_ne!(
            a.snapshots.last().unwrap().params,
            plain.snapshots.last().unwrap().params
        );
    }

    #[test]
    fn snapshots_round_trip_through_disk() {
        let fed = build_federation(&tiny_params(SubjectSampling::Standard, 2), 37).unwrap();
        let spec = MlpSpec { input_dim: 6, hidden: vec![3] };
        let run = train_federation(&fed, &spec, &tiny_cfg(), 47).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.save_snapshots(dir.path()).unwrap();
        let back = FedRun::load_snapshots(dir.path()).unwrap();
        assert_eq!(back.len(), run.snapshots.len());
        for (a, b) in run.snapshots.iter().zip(&back) {
            assert_eq!(a.params, b.params);
        }
    }
}
