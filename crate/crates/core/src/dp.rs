//! Differentially private gradient/update mechanisms at three granularities.
//!
//! All mechanisms share the clip-then-noise shape with clip factor
//! `min(1, C / ||v||_2)` and Gaussian noise `N(0, (sigma*C)^2 I)`:
//!
//! * item: per-example gradients are clipped, summed, noised, and divided by
//!   the batch size;
//! * subject: per-example gradients are averaged within each subject present
//!   in the batch, each group average is clipped, the clipped averages are
//!   summed, noised, and divided by the number of distinct subjects;
//! * user: the client's whole model delta is clipped and noised before it is
//!   sent for aggregation.
//!
//! The item and subject mechanisms are expressed as per-example *weights*:
//! the pre-noise batch sum is `sum_i w_i * g_i`, where the weight functions
//! here derive `w_i` from clip bounds and gradient dot products supplied by
//! the caller. This keeps the mechanisms independent of how gradients are
//! represented — training code can exploit gradient structure to form norms
//! and weighted sums without materializing any per-example gradient.
//!
//! The sentinel `sigma == 0 && clip == +inf` means "mechanism disabled": the
//! caller must bypass the mechanism entirely (`DpParams::is_off`), which keeps
//! disabled runs bit-identical to plain training — subject-level averaging is
//! not algebraically the batch mean even without clipping, so routing through
//! the mechanism would change results.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{l2_norm, scale};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpGranularity {
    Item,
    Subject,
    User,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub granularity: DpGranularity,
    /// L2 clip bound C; +inf disables clipping.
    pub clip: f64,
    /// Noise multiplier; the added noise has std sigma * C per coordinate.
    pub sigma: f64,
    /// Target delta for privacy reporting.
    pub delta: f64,
}

impl DpParams {
    /// Disabled-mechanism sentinel; callers bypass the mechanism entirely.
    pub fn is_off(&self) -> bool {
        self.sigma == 0.0 && self.clip.is_infinite()
    }
}

/// `v *= min(1, c / ||v||_2)`; no-op when the norm is within the bound.
pub fn clip_in_place(v: &mut [f64], c: f64) {
    if !c.is_finite() {
        return;
    }
    let n = l2_norm(v);
    if n > c {
        scale(v, c / n);
    }
}

/// Add iid `N(0, std^2)` to every coordinate.
pub fn add_gaussian(v: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    for vi in v.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *vi += std * z;
    }
}

/// The multiplier `clip_in_place` applies: `min(1, c / sqrt(sq_norm))`.
fn clip_scale(sq_norm: f64, c: f64) -> f64 {
    if !c.is_finite() {
        return 1.0;
    }
    // Factored squared norms can round a hair below zero for tiny vectors.
    let n = sq_norm.max(0.0).sqrt();
    if n > c {
        c / n
    } else {
        1.0
    }
}

/// Per-example coefficients for the item mechanism: example i enters the
/// batch sum as `copies[i] * min(1, C/||g_i||) * g_i`, i.e. each distinct
/// example is clipped once and counted with its multiplicity. `sq_norm(i)`
/// must return `||g_i||^2`. Returns the batch-size divisor (total copies).
pub fn item_clip_weights(
    copies: &[u32],
    clip: f64,
    mut sq_norm: impl FnMut(usize) -> f64,
    out: &mut Vec<f64>,
) -> f64 {
    out.clear();
    let mut total: u64 = 0;
    for (i, &c) in copies.iter().enumerate() {
        out.push(f64::from(c) * clip_scale(sq_norm(i), clip));
        total += u64::from(c);
    }
    total.max(1) as f64
}

/// Per-example coefficients for the subject mechanism: examples are grouped
/// by subject id, each group's mean gradient is clipped, and the clipped
/// means are summed. Example i in group g (of `n_g` total copies) gets
/// `copies[i]/n_g * min(1, C*n_g/||sum_g||)`; `grad_dot(i, j)` must return
/// `<g_i, g_j>` so group norms never need materialized gradients. Returns
/// the distinct-subject divisor. Grouping ignores input order: groups are
/// processed in ascending subject order, members in input order.
pub fn subject_clip_weights(
    subjects: &[u32],
    copies: &[u32],
    clip: f64,
    mut grad_dot: impl FnMut(usize, usize) -> f64,
    out: &mut Vec<f64>,
) -> f64 {
    assert_eq!(subjects.len(), copies.len());
    out.clear();
    out.resize(subjects.len(), 0.0);
    let mut idx: Vec<usize> = (0..subjects.len()).collect();
    idx.sort_unstable_by_key(|&i| (subjects[i], i));
    let mut groups: u64 = 0;
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && subjects[idx[e]] == subjects[idx[s]] {
            e += 1;
        }
        let members = &idx[s..e];
        let n: u64 = members.iter().map(|&i| u64::from(copies[i])).sum();
        let nf = n as f64;
        // ||sum_g c_i g_i||^2 via the symmetric pairwise expansion.
        let mut sq = 0.0;
        for (a, &i) in members.iter().enumerate() {
            let ci = f64::from(copies[i]);
            sq += ci * ci * grad_dot(i, i);
            for &j in &members[a + 1..] {
                sq += 2.0 * ci * f64::from(copies[j]) * grad_dot(i, j);
            }
        }
        let w = clip_scale(sq / (nf * nf), clip) / nf;
        for &i in members {
            out[i] = f64::from(copies[i]) * w;
        }
        groups += 1;
        s = e;
    }
    groups.max(1) as f64
}

/// User-level DP: clip and noise a client's model delta before aggregation.
pub fn privatize_user_delta(delta: &mut [f64], clip: f64, sigma: f64, rng: &mut ChaCha8Rng) {
    clip_in_place(delta, clip);
    add_gaussian(delta, sigma * clip, rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_norm;
    use crate::rng::stream;

    #[test]
    fn sentinel_detection() {
        let off = DpParams {
            granularity: DpGranularity::Subject,
            clip: f64::INFINITY,
            sigma: 0.0,
            delta: 1e-5,
        };
        assert!(off.is_off());
        let on = DpParams { clip: 1.0, ..off };
        assert!(!on.is_off());
        let noisy = DpParams { sigma: 0.5, ..off };
        assert!(!noisy.is_off());
    }

    #[test]
    fn clip_shrinks_long_vectors_only() {
        let mut v = vec![3.0, 4.0]; // norm 5
        clip_in_place(&mut v, 2.0);
        assert!((l2_norm(&v) - 2.0).abs() < 1e-12);
        assert!((v[0] / v[1] - 0.75).abs() < 1e-12); // direction kept

        let mut w = vec![0.3, 0.4]; // norm 0.5
        let before = w.clone();
        clip_in_place(&mut w, 2.0);
        assert_eq!(w, before);

        let mut z = vec![0.0, 0.0];
        clip_in_place(&mut z, 2.0);
        assert_eq!(z, vec![0.0, 0.0]);

        let mut inf = vec![30.0, 40.0];
        clip_in_place(&mut inf, f64::INFINITY);
        assert_eq!(inf, vec![30.0, 40.0]);
    }

    /// Reconstruct `(sum_i w_i g_i) / divisor` from explicit gradients.
    fn weighted_sum(grads: &[Vec<f64>], w: &[f64], divisor: f64) -> Vec<f64> {
        let mut out = vec![0.0; grads[0].len()];
        for (g, &wi) in grads.iter().zip(w) {
            for (o, v) in out.iter_mut().zip(g) {
                *o += wi * v / divisor;
            }
        }
        out
    }

    fn dots(grads: &[Vec<f64>]) -> impl Fn(usize, usize) -> f64 + '_ {
        |i, j| grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn item_weights_match_hand_clipping() {
        // grads: (3,4) norm 5 -> clipped to (0.6,0.8); (0.3,0.0) kept.
        let grads = vec![vec![3.0, 4.0], vec![0.3, 0.0]];
        let d = dots(&grads);
        let mut w = Vec::new();
        let divisor = item_clip_weights(&[1, 1], 1.0, |i| d(i, i), &mut w);
        assert!((divisor - 2.0).abs() < 1e-12);
        assert!((w[0] - 0.2).abs() < 1e-12); // 1/norm = 1/5
        assert!((w[1] - 1.0).abs() < 1e-12);
        let got = weighted_sum(&grads, &w, divisor);
        assert!((got[0] - (0.6 + 0.3) / 2.0).abs() < 1e-12);
        assert!((got[1] - 0.8 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn item_weights_count_multiplicity() {
        // A gradient seen 3 times must enter like three explicit repeats.
        let grads = vec![vec![0.9, -1.2, 0.3], vec![0.1, 0.1, 0.1]];
        let d = dots(&grads);
        let mut w = Vec::new();
        let divisor = item_clip_weights(&[3, 1], 0.5, |i| d(i, i), &mut w);
        assert!((divisor - 4.0).abs() < 1e-12);

        let repeated = vec![grads[0].clone(), grads[0].clone(), grads[0].clone(), grads[1].clone()];
        let dr = dots(&repeated);
        let mut wr = Vec::new();
        let dv = item_clip_weights(&[1, 1, 1, 1], 0.5, |i| dr(i, i), &mut wr);
        let a = weighted_sum(&grads, &w, divisor);
        let b = weighted_sum(&repeated, &wr, dv);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn subject_weights_group_semantics() {
        // Subject 1: examples (1,0) and (0,1) -> mean (0.5,0.5), norm ~0.707, kept at C=1.
        // Subject 2: example (6,8) -> mean (6,8), clipped to (0.6,0.8).
        // Output: ((0.5+0.6)/2, (0.5+0.8)/2).
        let grads = vec![vec![1.0, 0.0], vec![6.0, 8.0], vec![0.0, 1.0]];
        let d = dots(&grads);
        let mut w = Vec::new();
        let divisor = subject_clip_weights(&[1, 2, 1], &[1, 1, 1], 1.0, d, &mut w);
        assert!((divisor - 2.0).abs() < 1e-12);
        let got = weighted_sum(&grads, &w, divisor);
        assert!((got[0] - 0.55).abs() < 1e-12);
        assert!((got[1] - 0.65).abs() < 1e-12);

        // With unequal group sizes this is NOT the plain batch mean — the
        // reason disabled DP must bypass the mechanism instead of running it
        // with (sigma=0, C=inf).
        let plain = [(1.0 + 6.0 + 0.0) / 3.0, (0.0 + 8.0 + 1.0) / 3.0];
        assert!((got[0] - plain[0]).abs() > 0.1);
    }

    #[test]
    fn subject_weights_ignore_input_order() {
        let grads =
            vec![vec![1.0, 2.0], vec![0.5, -0.5], vec![-1.0, 0.25], vec![2.0, 2.0]];
        let subjects = [5u32, 2, 5, 9];
        let d = dots(&grads);
        let mut w = Vec::new();
        let divisor = subject_clip_weights(&subjects, &[1, 1, 1, 1], 1.5, d, &mut w);

        let perm = [3usize, 1, 0, 2];
        let pg: Vec<Vec<f64>> = perm.iter().map(|&i| grads[i].clone()).collect();
        let ps: Vec<u32> = perm.iter().map(|&i| subjects[i]).collect();
        let pd = dots(&pg);
        let mut pw = Vec::new();
        let pdiv = subject_clip_weights(&ps, &[1, 1, 1, 1], 1.5, pd, &mut pw);

        assert_eq!(divisor, pdiv);
        for (k, &i) in perm.iter().enumerate() {
            assert!((w[i] - pw[k]).abs() < 1e-15, "weight of example {i}");
        }
    }

    #[test]
    fn singleton_subjects_reduce_to_item_weights() {
        let grads = vec![vec![3.0, 4.0], vec![0.3, 0.0], vec![-0.6, 0.8]];
        let d = dots(&grads);
        let mut ws = Vec::new();
        let div_s = subject_clip_weights(&[7, 3, 11], &[1, 1, 1], 1.0, &d, &mut ws);
        let mut wi = Vec::new();
        let div_i = item_clip_weights(&[1, 1, 1], 1.0, |i| d(i, i), &mut wi);
        assert_eq!(div_s, div_i);
        for (a, b) in ws.iter().zip(&wi) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_subject_examples_average_before_clipping() {
        // One subject holding k copies of one example: the group mean is the
        // example's gradient, so the update is exactly its clipped gradient.
        let grads = vec![vec![6.0, 8.0]];
        let d = dots(&grads);
        let mut w = Vec::new();
        let divisor = subject_clip_weights(&[4], &[5], 1.0, d, &mut w);
        assert!((divisor - 1.0).abs() < 1e-12);
        let got = weighted_sum(&grads, &w, divisor);
        assert!((got[0] - 0.6).abs() < 1e-12);
        assert!((got[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn user_delta_clip_bound_holds() {
        let mut rng = stream(5, "t", &[]);
        let mut delta: Vec<f64> = (0..64).map(|i| (i as f64 - 31.5) * 0.2).collect();
        privatize_user_delta(&mut delta, 2.5, 0.0, &mut rng);
        assert!(l2_norm(&delta) <= 2.5 + 1e-12);
    }

    #[test]
    fn noise_streams_are_deterministic_and_distinct() {
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        let mut c = vec![0.0; 4];
        add_gaussian(&mut a, 1.0, &mut stream(6, "noise", &[0]));
        add_gaussian(&mut b, 1.0, &mut stream(6, "noise", &[0]));
        add_gaussian(&mut c, 1.0, &mut stream(6, "noise", &[1]));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_noise_moments_are_sane() {
        let mut v = vec![0.0; 20_000];
        add_gaussian(&mut v, 2.0, &mut stream(7, "noise", &[]));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.15, "var {var}");
    }
}
