//! Synthetic per-subject federation generator.
//!
//! A pool of subjects is drawn once: each subject is a diagonal-covariance
//! Gaussian whose mean is kept at L2 distance > 0.35 from every other mean in
//! the union of the member and non-member pools. Labels are a parity function
//! of coordinate signs, so the task is learnable but not linearly separable.
//!
//! Federation users draw their subjects from the member pool *with
//! replacement*; a subject's records may therefore appear on several users,
//! and part of the pool is never assigned at all. Ground-truth membership is
//! defined by assignment, not pool membership.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::stream;

/// Required L2 distance between any two subject means (strict).
pub const MIN_MEAN_SEPARATION: f64 = 0.35;
/// Per-coordinate variance range for subject covariances.
pub const VAR_RANGE: (f64, f64) = (0.0025, 0.0225);
/// Mean resampling attempts per subject before generation fails.
const RESAMPLE_BUDGET: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubjectSampling {
    /// Fresh Gaussian draw per record.
    Standard,
    /// Chinese-restaurant chain over Gaussian atoms: the k-th draw is fresh
    /// with probability alpha / (alpha + k), otherwise it repeats a uniformly
    /// chosen earlier draw.
    DirichletProcess { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSpec {
    pub mean: Vec<f64>,
    /// Diagonal of the covariance matrix.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPool {
    pub dim: usize,
    pub box_half_width: f64,
    pub subjects: Vec<SubjectSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: u8,
    /// Global subject id: member pool first, then non-member pool.
    pub subject: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserShard {
    /// Subject slots as drawn (duplicates allowed).
    pub slots: Vec<u32>,
    pub points: Vec<LabeledPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSubject {
    pub subject: u32,
    pub member: bool,
    pub points: Vec<LabeledPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Federation {
    pub dim: usize,
    pub sampling: SubjectSampling,
    pub seed: u64,
    pub member_pool: SubjectPool,
    pub nonmember_pool: SubjectPool,
    pub users: Vec<UserShard>,
    /// Subjects actually assigned to at least one user (ascending).
    pub members: Vec<u32>,
    /// Per-subject sample sets the auditor scores (members and non-members).
    pub attack: Vec<AttackSubject>,
    /// Held-out points from member subjects, for model accuracy.
    pub eval_points: Vec<LabeledPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub dim: usize,
    /// Candidate subjects per class; the union pool is twice this.
    pub pool_per_class: usize,
    pub users: usize,
    pub subjects_per_user: usize,
    pub items_per_user: usize,
    pub attack_samples_per_subject: usize,
    /// Total held-out evaluation points, split across member subjects.
    pub eval_items: usize,
    pub sampling: SubjectSampling,
    /// When set, member attack pools are the subjects' actual training
    /// records instead of freshly drawn samples.
    pub item_level_attack: bool,
}

/// Parity of coordinate signs; the boundary x_i = 0 counts as set.
pub fn xor_label(x: &[f64]) -> u8 {
    let mut b = 0u8;
    for &v in x {
        if v >= 0.0 {
            b ^= 1;
        }
    }
    b
}

/// ln Γ(x) for x > 0 (Stirling series after lifting x above 10).
pub fn ln_gamma(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0));
    shift + 0.5 * (2.0 * std::f64::consts::PI).ln() + (x - 0.5) * x.ln() - x + series
}

/// Half-width of the cube subject means are drawn from.
///
/// [-1,1]^d unless the separation requirement cannot be packed into it: a
/// volume bound with packing efficiency 0.25 widens the box just enough
/// (only relevant for very low dimensions at the default pool sizes).
pub fn mean_box_half_width(dim: usize, count: usize) -> f64 {
    let d = dim as f64;
    let r = MIN_MEAN_SEPARATION / 2.0;
    let ln_ball = 0.5 * d * std::f64::consts::PI.ln() + d * r.ln() - ln_gamma(0.5 * d + 1.0);
    let ln_side = ((4.0 * count as f64).ln() + ln_ball) / d;
    (0.5 * ln_side.exp()).max(1.0)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Draw `count` well-separated subject specs.
pub fn generate_pool(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<SubjectPool> {
    if dim == 0 {
        return Err(CoreError::Invalid("dim must be positive".into()));
    }
    let half = mean_box_half_width(dim, count);
    let min_sq = MIN_MEAN_SEPARATION * MIN_MEAN_SEPARATION;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        'attempt: for _ in 0..RESAMPLE_BUDGET {
            let cand: Vec<f64> = (0..dim).map(|_| rng.gen_range(-half..half)).collect();
            for m in &means {
                if dist_sq(m, &cand) <= min_sq {
                    continue 'attempt;
                }
            }
            means.push(cand);
            placed = true;
            break;
        }
        if !placed {
            return Err(CoreError::Generation(format!(
                "could not place subject mean {i} of {count} after {RESAMPLE_BUDGET} attempts (dim {dim})"
            )));
        }
    }
    let subjects = means
        .into_iter()
        .map(|mean| {
            let var = (0..dim).map(|_| rng.gen_range(VAR_RANGE.0..VAR_RANGE.1)).collect();
            SubjectSpec { mean, var }
        })
        .collect();
    Ok(SubjectPool { dim, box_half_width: half, subjects })
}

fn base_draw(spec: &SubjectSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    spec.mean
        .iter()
        .zip(&spec.var)
        .map(|(&m, &v)| {
            let z: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * z
        })
        .collect()
}

/// Record sampler for one subject. Dirichlet chains keep their atom state for
/// the subject's entire draw sequence.
pub struct SubjectSampler {
    sampling: SubjectSampling,
    atoms: Vec<Vec<f64>>,
    draws: u64,
}

impl SubjectSampler {
    pub fn new(sampling: SubjectSampling) -> Self {
        SubjectSampler { sampling, atoms: Vec::new(), draws: 0 }
    }

    pub fn draw(&mut self, spec: &SubjectSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self.sampling {
            SubjectSampling::Standard => base_draw(spec, rng),
            SubjectSampling::DirichletProcess { alpha } => {
                let k = self.draws as f64;
                self.draws += 1;
                let fresh: f64 = rng.gen();
                if fresh < alpha / (alpha + k) {
                    let x = base_draw(spec, rng);
                    self.atoms.push(x.clone());
                    x
                } else {
                    self.atoms[rng.gen_range(0..self.atoms.len())].clone()
                }
            }
        }
    }

    pub fn distinct_atoms(&self) -> usize {
        self.atoms.len()
    }
}

/// Sample `n` records for one subject with a fresh chain.
pub fn sample_points(
    spec: &SubjectSpec,
    sampling: SubjectSampling,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut s = SubjectSampler::new(sampling);
    (0..n).map(|_| s.draw(spec, rng)).collect()
}

fn labeled(x: Vec<f64>, subject: u32) -> LabeledPoint {
    let y = xor_label(&x);
    LabeledPoint { x, y, subject }
}

/// Build the full federation: pools, user shards, attack pools, eval set.
pub fn build_federation(params: &GenParams, seed: u64) -> Result<Federation> {
    if params.users == 0 || params.subjects_per_user == 0 {
        return Err(CoreError::Invalid("users and subjects_per_user must be positive".into()));
    }
    if params.pool_per_class == 0 {
        return Err(CoreError::Invalid("pool_per_class must be positive".into()));
    }
    if let SubjectSampling::DirichletProcess { alpha } = params.sampling {
        if !(alpha > 0.0) {
            return Err(CoreError::Invalid("alpha must be positive".into()));
        }
    }

    // One joint pool keeps the separation requirement across both classes.
    let mut pool_rng = stream(seed, "pool", &[]);
    let joint = generate_pool(params.dim, 2 * params.pool_per_class, &mut pool_rng)?;
    let half = joint.box_half_width;
    let mut subjects = joint.subjects;
    let nonmember_specs = subjects.split_off(params.pool_per_class);
    let member_pool = SubjectPool { dim: params.dim, box_half_width: half, subjects };
    let nonmember_pool =
        SubjectPool { dim: params.dim, box_half_width: half, subjects: nonmember_specs };

    // Subject slots per user, drawn with replacement from the member pool.
    let mut assign_rng = stream(seed, "assign", &[]);
    let slots: Vec<Vec<u32>> = (0..params.users)
        .map(|_| {
            (0..params.subjects_per_user)
                .map(|_| assign_rng.gen_range(0..params.pool_per_class as u32))
                .collect()
        })
        .collect();

    let mut members: Vec<u32> = slots.iter().flatten().copied().collect();
    members.sort_unstable();
    members.dedup();

    // Items per slot: even split, remainder to the lowest-index slots.
    let base = params.items_per_user / params.subjects_per_user;
    let rem = params.items_per_user % params.subjects_per_user;
    let slot_items = |s: usize| base + usize::from(s < rem);

    // Eval points: even split across member subjects, remainder to lowest ids.
    let eval_base = params.eval_items / members.len().max(1);
    let eval_rem = params.eval_items % members.len().max(1);

    // Draw plan per member subject: every (user, slot) segment in ascending
    // order, then the attack segment, then the eval segment — one continuous
    // chain per subject, driven by that subject's own stream.
    let mut slots_of_subject: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
    for (u, user_slots) in slots.iter().enumerate() {
        for (s, &subj) in user_slots.iter().enumerate() {
            slots_of_subject.entry(subj).or_default().push((u, s));
        }
    }

    let mut shard_points: Vec<Vec<Vec<LabeledPoint>>> = (0..params.users)
        .map(|_| (0..params.subjects_per_user).map(|s| Vec::with_capacity(slot_items(s))).collect())
        .collect();
    let mut attack: Vec<AttackSubject> = Vec::new();
    let mut eval_points: Vec<LabeledPoint> = Vec::new();

    for (mi, &subj) in members.iter().enumerate() {
        let spec = &member_pool.subjects[subj as usize];
        let mut sampler = SubjectSampler::new(params.sampling);
        let mut rng = stream(seed, "subject", &[u64::from(subj)]);

        let mut training: Vec<LabeledPoint> = Vec::new();
        for &(u, s) in &slots_of_subject[&subj] {
            let n = slot_items(s);
            let mut seg: Vec<LabeledPoint> =
                (0..n).map(|_| labeled(sampler.draw(spec, &mut rng), subj)).collect();
            if params.item_level_attack {
                training.extend(seg.iter().cloned());
            }
            shard_points[u][s].append(&mut seg);
        }

        let attack_points: Vec<LabeledPoint> = if params.item_level_attack {
            let n = params.attack_samples_per_subject.min(training.len());
            let mut pick_rng = stream(seed, "attackpick", &[u64::from(subj)]);
            let mut idx: Vec<usize> = index_sample(&mut pick_rng, training.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| training[i].clone()).collect()
        } else {
            (0..params.attack_samples_per_subject)
                .map(|_| labeled(sampler.draw(spec, &mut rng), subj))
                .collect()
        };
        attack.push(AttackSubject { subject: subj, member: true, points: attack_points });

        let n_eval = eval_base + usize::from(mi < eval_rem);
        eval_points
            .extend((0..n_eval).map(|_| labeled(sampler.draw(spec, &mut rng), subj)));
    }

    // Non-member attack subjects: a balanced prefix of the non-member pool.
    let n_nonmembers = members.len().min(params.pool_per_class);
    for i in 0..n_nonmembers {
        let global = (params.pool_per_class + i) as u32;
        let spec = &nonmember_pool.subjects[i];
        let mut sampler = SubjectSampler::new(params.sampling);
        let mut rng = stream(seed, "subject", &[u64::from(global)]);
        let points = (0..params.attack_samples_per_subject)
            .map(|_| labeled(sampler.draw(spec, &mut rng), global))
            .collect();
        attack.push(AttackSubject { subject: global, member: false, points });
    }

    let users = slots
        .into_iter()
        .zip(shard_points)
        .map(|(user_slots, per_slot)| UserShard {
            slots: user_slots,
            points: per_slot.into_iter().flatten().collect(),
        })
        .collect();

    Ok(Federation {
        dim: params.dim,
        sampling: params.sampling,
        seed,
        member_pool,
        nonmember_pool,
        users,
        members,
        attack,
        eval_points,
    })
}

// --- value dedup -------------------------------------------------------------
//
// Dirichlet-process shards repeat a small set of atom vectors thousands of
// times. Grouping bit-identical x vectors once lets the trainer, the eval
// loop, and the loss-trace collector do per-distinct-value work only.

#[derive(Clone, Debug)]
pub struct ValueIndex {
    /// Atom id for every point.
    pub atom_of: Vec<u32>,
    /// Representative point index per atom.
    pub reps: Vec<u32>,
    /// Total multiplicity per atom.
    pub counts: Vec<u32>,
}

pub fn hash_x(x: &[f64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &v in x {
        h = crate::rng::mix(h ^ v.to_bits());
    }
    h
}

/// Group points with bit-identical x vectors.
pub fn index_points(points: &[LabeledPoint]) -> ValueIndex {
    let mut by_hash: HashMap<u64, Vec<u32>> = HashMap::new();
    let mut atom_of = Vec::with_capacity(points.len());
    let mut reps: Vec<u32> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let bucket = by_hash.entry(hash_x(&p.x)).or_default();
        let mut found = None;
        for &atom in bucket.iter() {
            if points[reps[atom as usize] as usize].x == p.x {
                found = Some(atom);
                break;
            }
        }
        let atom = found.unwrap_or_else(|| {
            let atom = reps.len() as u32;
            reps.push(i as u32);
            counts.push(0);
            bucket.push(atom);
            atom
        });
        counts[atom as usize] += 1;
        atom_of.push(atom);
    }
    ValueIndex { atom_of, reps, counts }
}

// --- persistence -----------------------------------------------------------
//
// Versioned binary: magic, u32 version, JSON header with the structural
// fields, then every f64 as raw little-endian bits (lossless round-trip).

const FED_MAGIC: &[u8; 8] = b"FLAUDFED";
const FED_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FedHeader {
    dim: usize,
    sampling: SubjectSampling,
    seed: u64,
    pool_per_class: usize,
    box_half_width: f64,
    user_slots: Vec<Vec<u32>>,
    user_points: Vec<usize>,
    members: Vec<u32>,
    attack_subjects: Vec<(u32, bool, usize)>,
    eval_count: usize,
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for &v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_points<W: Write>(w: &mut W, pts: &[LabeledPoint]) -> Result<()> {
    for p in pts {
        w.write_all(&p.subject.to_le_bytes())?;
        w.write_all(&[p.y])?;
        write_f64s(w, &p.x)?;
    }
    Ok(())
}

fn read_points<R: Read>(r: &mut R, n: usize, dim: usize) -> Result<Vec<LabeledPoint>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut sub = [0u8; 4];
        r.read_exact(&mut sub)?;
        let mut y = [0u8; 1];
        r.read_exact(&mut y)?;
        let x = read_f64s(r, dim)?;
        out.push(LabeledPoint { x, y: y[0], subject: u32::from_le_bytes(sub) });
    }
    Ok(out)
}

fn write_pool<W: Write>(w: &mut W, pool: &SubjectPool) -> Result<()> {
    for s in &pool.subjects {
        write_f64s(w, &s.mean)?;
        write_f64s(w, &s.var)?;
    }
    Ok(())
}

fn read_pool<R: Read>(r: &mut R, n: usize, dim: usize, half: f64) -> Result<SubjectPool> {
    let mut subjects = Vec::with_capacity(n);
    for _ in 0..n {
        let mean = read_f64s(r, dim)?;
        let var = read_f64s(r, dim)?;
        subjects.push(SubjectSpec { mean, var });
    }
    Ok(SubjectPool { dim, box_half_width: half, subjects })
}

impl Federation {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = FedHeader {
            dim: self.dim,
            sampling: self.sampling,
            seed: self.seed,
            pool_per_class: self.member_pool.subjects.len(),
            box_half_width: self.member_pool.box_half_width,
            user_slots: self.users.iter().map(|u| u.slots.clone()).collect(),
            user_points: self.users.iter().map(|u| u.points.len()).collect(),
            members: self.members.clone(),
            attack_subjects: self
                .attack
                .iter()
                .map(|a| (a.subject, a.member, a.points.len()))
                .collect(),
            eval_count: self.eval_points.len(),
        };
        let hdr = serde_json::to_vec(&header)
            .map_err(|e| CoreError::Format(format!("header encode: {e}")))?;
        w.write_all(FED_MAGIC)?;
        w.write_all(&FED_VERSION.to_le_bytes())?;
        w.write_all(&(hdr.len() as u64).to_le_bytes())?;
        w.write_all(&hdr)?;
        write_pool(&mut w, &self.member_pool)?;
        write_pool(&mut w, &self.nonmember_pool)?;
        for u in &self.users {
            write_points(&mut w, &u.points)?;
        }
        for a in &self.attack {
            write_points(&mut w, &a.points)?;
        }
        write_points(&mut w, &self.eval_points)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Federation> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FED_MAGIC {
            return Err(CoreError::Format("bad federation magic".into()));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        let ver = u32::from_le_bytes(ver);
        if ver != FED_VERSION {
            return Err(CoreError::Format(format!("unsupported federation version {ver}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut hdr = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut hdr)?;
        let header: FedHeader = serde_json::from_slice(&hdr)
            .map_err(|e| CoreError::Format(format!("header decode: {e}")))?;

        let member_pool =
            read_pool(&mut r, header.pool_per_class, header.dim, header.box_half_width)?;
        let nonmember_pool =
            read_pool(&mut r, header.pool_per_class, header.dim, header.box_half_width)?;
        let mut users = Vec::with_capacity(header.user_slots.len());
        for (slots, n) in header.user_slots.into_iter().zip(header.user_points) {
            let points = read_points(&mut r, n, header.dim)?;
            users.push(UserShard { slots, points });
        }
        let mut attack = Vec::with_capacity(header.attack_subjects.len());
        for (subject, member, n) in header.attack_subjects {
            let points = read_points(&mut r, n, header.dim)?;
            attack.push(AttackSubject { subject, member, points });
        }
        let eval_points = read_points(&mut r, header.eval_count, header.dim)?;
        Ok(Federation {
            dim: header.dim,
            sampling: header.sampling,
            seed: header.seed,
            member_pool,
            nonmember_pool,
            users,
            members: header.members,
            attack,
            eval_points,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0) - 0.0).abs() < 1e-10);
        assert!((ln_gamma(2.0) - 0.0).abs() < 1e-10);
        assert!((ln_gamma(0.5) - 0.5723649429247001).abs() < 1e-10);
        // ln(10!) — Γ(11)
        assert!((ln_gamma(11.0) - 15.104412573075516).abs() < 1e-9);
    }

    #[test]
    fn xor_label_cases() {
        assert_eq!(xor_label(&[0.3, -0.2]), 1);
        assert_eq!(xor_label(&[0.3, 0.2]), 0);
        assert_eq!(xor_label(&[-0.3, -0.2]), 0);
        assert_eq!(xor_label(&[0.0, -0.2]), 1); // boundary counts as set
        assert_eq!(xor_label(&[1.0, 1.0, 1.0]), 1);
        assert_eq!(xor_label(&[]), 0);
    }

    #[test]
    fn box_stays_unit_in_high_dim_and_widens_at_d2() {
        assert!((mean_box_half_width(1000, 200) - 1.0).abs() < 1e-12);
        assert!((mean_box_half_width(50, 200) - 1.0).abs() < 1e-12);
        let w2 = mean_box_half_width(2, 200);
        assert!(w2 > 3.0 && w2 < 6.0, "w2 = {w2}");
    }
}
