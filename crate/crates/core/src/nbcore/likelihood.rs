//! Aggregate-data likelihoods for an arm of `n` subjects sharing one exposure.
//!
//! The zero count `Z` is binomial with the single-subject zero probability. The
//! total `T` is approximated as normal, either marginally or conditionally on
//! `Z` as a sum of `n - Z` zero-truncated counts. `T` is treated as continuous
//! (no continuity correction).

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use serde::Serialize;

use super::{total_count_moments, truncated_moments_with, NbParams, TruncatedVariance};
use crate::error::{domain, Error, Result};

/// One arm's reported summary counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateObservation {
    pub n_patients: u64,
    pub total: Option<u64>,
    pub zeroes: Option<u64>,
    pub rate_est: Option<f64>,
    pub std_err: Option<f64>,
}

impl AggregateObservation {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(domain("arm must have at least one patient"));
        }
        let has_se = self.rate_est.is_some() && self.std_err.is_some();
        if self.total.is_none() && self.zeroes.is_none() && !has_se {
            return Err(domain("observation carries no total, zero count, or rate with standard error"));
        }
        if let Some(z) = self.zeroes {
            if z > self.n_patients {
                return Err(domain(format!("zeroes {z} exceed patients {}", self.n_patients)));
            }
            if z == self.n_patients && self.total.is_some_and(|t| t > 0) {
                return Err(Error::ImpossibleData("all patients event-free but total is positive".into()));
            }
        }
        for v in [self.rate_est, self.std_err].into_iter().flatten() {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("rate estimates and standard errors must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn normal_log_density(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * PI * variance).ln() + d * d / variance)
}

/// Binomial log-pmf with the success probability given by its log and the log of
/// its complement, so neither needs to be recomputed from a rounded probability.
pub fn log_binomial_pmf(k: u64, n: u64, log_p: f64, log_q: f64) -> f64 {
    let log_choose =
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
    let success = if k == 0 { 0.0 } else { k as f64 * log_p };
    let failure = if k == n { 0.0 } else { (n - k) as f64 * log_q };
    log_choose + success + failure
}

fn zero_log_probs(params: &NbParams) -> (f64, f64) {
    let log_p0 = params.log_zero_prob();
    (log_p0, (-log_p0.exp_m1()).ln())
}

fn check_counts(zeroes: u64, n: u64) -> Result<()> {
    if n == 0 {
        return Err(domain("number of patients must be positive"));
    }
    if zeroes > n {
        return Err(domain(format!("zeroes {zeroes} exceed patients {n}")));
    }
    Ok(())
}

/// An arm's zero count with its binomial coefficient computed once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZeroCount {
    zeroes: u64,
    n: u64,
    log_choose: f64,
}

impl ZeroCount {
    pub fn new(zeroes: u64, n: u64) -> Result<Self> {
        check_counts(zeroes, n)?;
        let log_choose =
            ln_gamma(n as f64 + 1.0) - ln_gamma(zeroes as f64 + 1.0) - ln_gamma((n - zeroes) as f64 + 1.0);
        Ok(Self { zeroes, n, log_choose })
    }

    pub fn zeroes(&self) -> u64 {
        self.zeroes
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    fn log_binomial(&self, log_p0: f64, log_pos: f64) -> f64 {
        let success = if self.zeroes == 0 { 0.0 } else { self.zeroes as f64 * log_p0 };
        let failure = if self.zeroes == self.n { 0.0 } else { (self.n - self.zeroes) as f64 * log_pos };
        self.log_choose + success + failure
    }

    /// Binomial log-probability of the zero count.
    pub fn log_lik(&self, params: &NbParams) -> f64 {
        let (log_p0, log_pos) = zero_log_probs(params);
        self.log_binomial(log_p0, log_pos)
    }

    /// Joint log-likelihood of the zero count and the arm total.
    pub fn joint_log_lik(&self, total: u64, params: &NbParams, form: TruncatedVariance) -> Result<f64> {
        let (log_p0, log_pos) = zero_log_probs(params);
        let log_z = self.log_binomial(log_p0, log_pos);
        let positive = self.n - self.zeroes;
        if positive == 0 {
            return if total == 0 {
                Ok(log_z)
            } else {
                Err(Error::ImpossibleData(format!("all {} patients event-free but total is {total}", self.n)))
            };
        }
        let tm = truncated_moments_with(params, form)?;
        let k = positive as f64;
        Ok(log_z + normal_log_density(total as f64, k * tm.trunc_mean, k * tm.trunc_var))
    }
}

/// `log p(t, z) = log Binomial(z; n, pi0) + log Normal(t; (n-z) theta, (n-z) sigma^2)`.
///
/// With `z = n` the conditional factor is a point mass at `t = 0`.
pub fn joint_log_lik(total: u64, zeroes: u64, n: u64, params: &NbParams) -> Result<f64> {
    ZeroCount::new(zeroes, n)?.joint_log_lik(total, params, TruncatedVariance::Exact)
}

/// Normal approximation to the marginal total count.
pub fn total_only_log_lik(total: u64, n: u64, params: &NbParams) -> Result<f64> {
    let (mean, var) = total_count_moments(n, params)?;
    Ok(normal_log_density(total as f64, mean, var))
}

/// Exact binomial log-pmf of the zero count.
pub fn zero_only_log_lik(zeroes: u64, n: u64, params: &NbParams) -> Result<f64> {
    Ok(ZeroCount::new(zeroes, n)?.log_lik(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbcore::{exact_joint_pmf, exact_total_pmf, zero_prob};
    use approx::assert_relative_eq;

    fn p(rate: f64, phi: f64, exposure: f64) -> NbParams {
        NbParams::new(rate, phi, exposure).unwrap()
    }

    fn exact_binomial(z: u64, n: u64, prob: f64) -> f64 {
        // Pascal-triangle coefficient, independent of ln_gamma.
        let mut c = 1.0;
        for i in 0..z {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c * prob.powi(z as i32) * (1.0 - prob).powi((n - z) as i32)
    }

    #[test]
    fn all_zero_degenerate_case() {
        let v = joint_log_lik(0, 10, 10, &p(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(v, 10.0 * 0.5f64.ln(), epsilon = 1e-12);
        assert!(matches!(joint_log_lik(3, 10, 10, &p(1.0, 1.0, 1.0)), Err(Error::ImpossibleData(_))));
        assert!(joint_log_lik(3, 11, 10, &p(1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn joint_marginalizes_to_binomial() {
        let prm = p(0.9, 0.5, 1.0);
        let (n, z) = (20, 8);
        let marginal: f64 = (0..400).map(|t| joint_log_lik(t, z, n, &prm).unwrap().exp()).sum();
        let target = exact_binomial(z, n, zero_prob(&prm));
        assert!(((marginal - target) / target).abs() < 1e-3, "{marginal} vs {target}");
    }

    #[test]
    fn joint_approximation_improves_with_n() {
        let settings = [(0.8, 0.5, 1.0), (1.5, 0.3, 1.0), (0.5, 1.0, 2.0), (2.0, 0.8, 0.5), (1.0, 0.0, 1.0)];
        for &(rate, phi, exposure) in &settings {
            let prm = p(rate, phi, exposure);
            let tv = |n: u64| {
                let table = exact_joint_pmf(n, &prm, 300).unwrap();
                assert!(table.total_mass() > 0.999);
                table.total_variation(|t, z| joint_log_lik(t, z, n, &prm).map_or(0.0, f64::exp))
            };
            let (small, large) = (tv(5), tv(20));
            assert!(large < small, "{rate} {phi} {exposure}: {small} -> {large}");
        }
    }

    #[test]
    fn total_only_examples() {
        let prm = p(0.9, 1.0, 1.0);
        let at_mean = total_only_log_lik(90, 100, &prm).unwrap();
        assert_relative_eq!(at_mean, -0.5 * (2.0 * PI * 171.0).ln(), epsilon = 1e-12);
        for t in (0..300).filter(|&t| t != 90) {
            assert!(total_only_log_lik(t, 100, &prm).unwrap() < at_mean);
        }
    }

    #[test]
    fn total_only_close_to_convolution_at_mode() {
        let prm = p(0.7, 0.6, 1.0);
        let exact = exact_total_pmf(30, &prm, 400).unwrap();
        let (mode, &pmode) = exact
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let approx = total_only_log_lik(mode as u64, 30, &prm).unwrap();
        assert!((approx - pmode.ln()).abs() < 0.05, "{approx} vs {}", pmode.ln());
    }

    #[test]
    fn zero_only_examples() {
        let v = zero_only_log_lik(0, 1, &p(1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(v, (1.0 - (-1.0f64).exp()).ln(), epsilon = 1e-14);
        let prm = p(0.6, 0.3, 2.0);
        assert_relative_eq!(
            zero_only_log_lik(12, 12, &prm).unwrap(),
            12.0 * zero_prob(&prm).ln(),
            epsilon = 1e-12
        );
        let total: f64 = (0..=40).map(|z| zero_only_log_lik(z, 40, &prm).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_only_mle_recovers_rate_for_beeh_placebo() {
        // Root of d/d(log rate) log-lik at phi = 0: pi0 = z / n.
        let (n, z, delta) = (403u64, 323u64, 0.2308);
        let loglik = |log_rate: f64| zero_only_log_lik(z, n, &p(log_rate.exp(), 0.0, delta)).unwrap();
        let (mut lo, mut hi) = ((0.01f64).ln(), (10.0f64).ln());
        for _ in 0..200 {
            let a = lo + (hi - lo) / 3.0;
            let b = hi - (hi - lo) / 3.0;
            if loglik(a) < loglik(b) {
                lo = a;
            } else {
                hi = b;
            }
        }
        let expected = -(323.0f64 / 403.0).ln() / 0.2308;
        assert_relative_eq!(((lo + hi) / 2.0).exp(), expected, max_relative = 1e-7);
    }

    #[test]
    fn observation_validation() {
        let base = AggregateObservation { n_patients: 10, total: None, zeroes: Some(3), rate_est: None, std_err: None };
        assert!(base.validate().is_ok());
        let empty = AggregateObservation { zeroes: None, ..base.clone() };
        assert!(empty.validate().is_err());
        let rate_only = AggregateObservation { zeroes: None, rate_est: Some(1.0), ..base.clone() };
        assert!(rate_only.validate().is_err());
        let impossible = AggregateObservation { zeroes: Some(10), total: Some(2), ..base.clone() };
        assert!(matches!(impossible.validate(), Err(Error::ImpossibleData(_))));
        let too_many = AggregateObservation { zeroes: Some(11), ..base };
        assert!(too_many.validate().is_err());
    }
}
