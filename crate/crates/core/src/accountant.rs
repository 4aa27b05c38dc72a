//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! Per-step RDP at order alpha:
//! * q = 1 (no subsampling): exactly alpha / (2 sigma^2), tracked over a
//!   dense real order grid;
//! * q < 1: the integer-order bound
//!   `(1/(alpha-1)) * ln( sum_k C(alpha,k) (1-q)^(alpha-k) q^k
//!   e^{(k^2-k)/(2 sigma^2)} )`, evaluated in log space.
//!
//! Composition is linear in steps; the conversion
//! `eps = min_alpha [steps * rdp(alpha) + ln(1/delta) / (alpha - 1)]`
//! makes everything reported here an upper bound on the true eps.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub epsilon: f64,
    /// Order achieving the minimum.
    pub order: f64,
}

#[derive(Debug)]
pub struct RdpAccountant {
    orders: Vec<f64>,
    /// Per-step RDP at each order.
    per_step: Vec<f64>,
}

/// Exact-sum ln n! for the small integer orders the bound uses.
fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn logsumexp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Per-step RDP of the subsampled Gaussian at integer order `alpha >= 2`.
pub fn rdp_subsampled_step(q: f64, sigma: f64, alpha: u64) -> f64 {
    debug_assert!(alpha >= 2 && q > 0.0 && q < 1.0 && sigma > 0.0);
    let terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let mut t = ln_binomial(alpha, k);
            if k > 0 {
                t += k as f64 * q.ln();
            }
            if k < alpha {
                t += (alpha - k) as f64 * (1.0 - q).ln();
            }
            t + (k * k - k) as f64 / (2.0 * sigma * sigma)
        })
        .collect();
    logsumexp(&terms) / (alpha as f64 - 1.0)
}

/// Per-step RDP of the unsubsampled Gaussian: alpha / (2 sigma^2).
pub fn rdp_gaussian_step(sigma: f64, alpha: f64) -> f64 {
    alpha / (2.0 * sigma * sigma)
}

impl RdpAccountant {
    /// `q` is the per-step sampling fraction in (0, 1]; `sigma` the noise
    /// multiplier. A zero sigma provides no privacy and is an error.
    pub fn new(q: f64, sigma: f64) -> Result<RdpAccountant> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(CoreError::Invalid(format!("sampling fraction q={q} outside (0, 1]")));
        }
        if !(sigma > 0.0) {
            return Err(CoreError::NoiseRequired(format!(
                "sigma={sigma}: the accountant needs positive noise"
            )));
        }
        let (orders, per_step): (Vec<f64>, Vec<f64>) = if q == 1.0 {
            let orders: Vec<f64> = (0..252).map(|i| 1.25 + 0.25 * i as f64).collect();
            let per_step = orders.iter().map(|&a| rdp_gaussian_step(sigma, a)).collect();
            (orders, per_step)
        } else {
            let orders: Vec<f64> = (2..=64).map(|a| a as f64).collect();
            let per_step = (2u64..=64).map(|a| rdp_subsampled_step(q, sigma, a)).collect();
            (orders, per_step)
        };
        Ok(RdpAccountant { orders, per_step })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    /// Best (epsilon, order) after `steps` compositions at target `delta`.
    pub fn epsilon(&self, steps: u64, delta: f64) -> Result<PrivacySpent> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CoreError::Invalid(format!("delta={delta} outside (0, 1)")));
        }
        let ln_inv_delta = (1.0 / delta).ln();
        let mut best: Option<PrivacySpent> = None;
        for (&a, &r) in self.orders.iter().zip(&self.per_step) {
            let eps = steps as f64 * r + ln_inv_delta / (a - 1.0);
            if best.map_or(true, |b| eps < b.epsilon) {
                best = Some(PrivacySpent { epsilon: eps, order: a });
            }
        }
        Ok(best.expect("order grid is never empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_rdp_is_exact() {
        assert!((rdp_gaussian_step(3.0, 2.0) - 1.0 / 9.0).abs() < 1e-15);
        assert!((rdp_gaussian_step(1.0, 64.0) - 32.0).abs() < 1e-12);
    }

    #[test]
    fn subsampled_rdp_alpha2_matches_closed_form() {
        // alpha = 2: rdp = ln((1-q)^2 + 2q(1-q) + q^2 e^{1/sigma^2}).
        let (q, sigma): (f64, f64) = (0.002, 1.8346);
        let closed =
            ((1.0 - q) * (1.0 - q) + 2.0 * q * (1.0 - q) + q * q * (1.0 / (sigma * sigma)).exp())
                .ln();
        let got = rdp_subsampled_step(q, sigma, 2);
        // Both paths agree to the absolute accuracy the f64 log-sum allows.
        assert!((got - closed).abs() < 1e-13);
        assert!((got - 1.383852255922247e-6).abs() < 1e-13);
    }

    #[test]
    fn subsampled_rdp_frozen_values() {
        // High-precision reference values for the binomial bound.
        let a = rdp_subsampled_step(0.01, 2.0, 8);
        assert!((a - 1.1575614792991032e-4).abs() < 1e-13);
        let b = rdp_subsampled_step(0.01, 2.0, 2);
        assert!((b - 2.8402138324224849e-5).abs() < 1e-13);
        let c = rdp_subsampled_step(0.05, 1.0, 16);
        assert!((c - 4.8045584416092146).abs() / c < 1e-9);
    }

    #[test]
    fn epsilon_frozen_operating_points() {
        let acc = RdpAccountant::new(0.002, 1.8346).unwrap();
        let spent = acc.epsilon(10_000, 1e-5).unwrap();
        assert!((spent.epsilon - 0.580449136261).abs() < 1e-9, "eps {}", spent.epsilon);
        assert!((spent.order - 40.0).abs() < 1e-12);

        let full = RdpAccountant::new(1.0, 1.8346).unwrap();
        let spent = full.epsilon(20, 1e-5).unwrap();
        assert!((spent.epsilon - 14.6697617537).abs() < 1e-8, "eps {}", spent.epsilon);
        assert!((spent.order - 3.0).abs() < 1e-12);
    }

    #[test]
    fn epsilon_monotone_in_steps_and_sigma() {
        let acc = RdpAccountant::new(0.01, 1.5).unwrap();
        let e1 = acc.epsilon(100, 1e-5).unwrap().epsilon;
        let e2 = acc.epsilon(1000, 1e-5).unwrap().epsilon;
        assert!(e2 > e1);
        let quieter = RdpAccountant::new(0.01, 3.0).unwrap();
        assert!(quieter.epsilon(100, 1e-5).unwrap().epsilon < e1);
    }

    #[test]
    fn zero_sigma_is_rejected() {
        match RdpAccountant::new(0.1, 0.0) {
            Err(CoreError::NoiseRequired(_)) => {}
            other => panic!("expected NoiseRequired, got {other:?}"),
        }
    }

    #[test]
    fn bad_q_and_delta_are_rejected() {
        assert!(RdpAccountant::new(0.0, 1.0).is_err());
        assert!(RdpAccountant::new(1.5, 1.0).is_err());
        let acc = RdpAccountant::new(0.5, 1.0).unwrap();
        assert!(acc.epsilon(10, 0.0).is_err());
        assert!(acc.epsilon(10, 1.0).is_err());
    }
}
