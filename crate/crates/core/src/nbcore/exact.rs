//! Exact small-`n` distributions of the total and zero counts by convolution.
//!
//! These are reference computations for checking the normal approximations in
//! the likelihood; their cost grows with `n * max_total^2`.

use super::{likelihood::log_binomial_pmf, nb_pmf, NbParams};
use crate::error::{domain, Error, Result};

pub const MAX_EXACT_PATIENTS: u64 = 30;

/// Each truncated pmf stops once its cumulative mass exceeds `1 - TAIL_CUTOFF`.
const TAIL_CUTOFF: f64 = 1e-14;

/// `P(T = t, Z = z)` for `t in 0..=max_total`, `z in 0..=n`.
#[derive(Debug, Clone)]
pub struct JointPmfTable {
    n: u64,
    max_total: u64,
    /// Row per zero count, column per total.
    probs: Vec<Vec<f64>>,
}

impl JointPmfTable {
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn max_total(&self) -> u64 {
        self.max_total
    }

    pub fn prob(&self, total: u64, zeroes: u64) -> f64 {
        if total > self.max_total || zeroes > self.n {
            return 0.0;
        }
        self.probs[zeroes as usize][total as usize]
    }

    /// `sum_t P(t, z)`.
    pub fn zero_marginal(&self, zeroes: u64) -> f64 {
        self.probs[zeroes as usize].iter().sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().flatten().sum()
    }

    /// Half the L1 distance between the table and `other(t, z)` over the table's support.
    pub fn total_variation(&self, other: impl Fn(u64, u64) -> f64) -> f64 {
        let mut acc = 0.0;
        for (z, row) in self.probs.iter().enumerate() {
            for (t, &pr) in row.iter().enumerate() {
                acc += (pr - other(t as u64, z as u64)).abs();
            }
        }
        0.5 * acc
    }
}

fn guard(n: u64) -> Result<()> {
    if n == 0 {
        return Err(domain("number of patients must be positive"));
    }
    if n > MAX_EXACT_PATIENTS {
        return Err(Error::CostGuard { n, limit: MAX_EXACT_PATIENTS });
    }
    Ok(())
}

/// The pmf of one count conditional on `X > 0`, indexed from 0 (entry 0 is zero).
pub fn zero_truncated_pmf(params: &NbParams, max_total: u64) -> Vec<f64> {
    let p_pos = -params.log_zero_prob().exp_m1();
    let mut pmf = vec![0.0];
    let mut cumulative = 0.0;
    for j in 1..=max_total {
        let q = nb_pmf(j, params) / p_pos;
        pmf.push(q);
        cumulative += q;
        if cumulative > 1.0 - TAIL_CUTOFF {
            break;
        }
    }
    pmf
}

fn convolve(a: &[f64], b: &[f64], max_len: usize) -> Vec<f64> {
    let len = (a.len() + b.len() - 1).min(max_len);
    let mut out = vec![0.0; len];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            if i + j >= len {
                break;
            }
            out[i + j] += x * y;
        }
    }
    out
}

pub fn exact_joint_pmf(n: u64, params: &NbParams, max_total: u64) -> Result<JointPmfTable> {
    guard(n)?;
    let width = max_total as usize + 1;
    let truncated = zero_truncated_pmf(params, max_total);
    let log_p0 = params.log_zero_prob();
    let log_pos = (-log_p0.exp_m1()).ln();

    // sums[k] = pmf of a sum of k truncated draws.
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(n as usize + 1);
    sums.push(vec![1.0]);
    for k in 1..=n as usize {
        let next = convolve(&sums[k - 1], &truncated, width);
        sums.push(next);
    }

    let probs = (0..=n)
        .map(|z| {
            let weight = log_binomial_pmf(z, n, log_p0, log_pos).exp();
            let mut row = vec![0.0; width];
            for (t, &s) in sums[(n - z) as usize].iter().enumerate() {
                row[t] = weight * s;
            }
            row
        })
        .collect();
    Ok(JointPmfTable { n, max_total, probs })
}

/// Exact pmf of the total of `n` independent counts, `t in 0..=max_total`.
pub fn exact_total_pmf(n: u64, params: &NbParams, max_total: u64) -> Result<Vec<f64>> {
    guard(n)?;
    let width = max_total as usize + 1;
    let single: Vec<f64> = (0..=max_total).map(|x| nb_pmf(x, params)).collect();
    let mut acc = vec![1.0];
    for _ in 0..n {
        acc = convolve(&acc, &single, width);
    }
    acc.resize(width, 0.0);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbcore::zero_prob;
    use approx::assert_relative_eq;

    fn p(rate: f64, phi: f64, exposure: f64) -> NbParams {
        NbParams::new(rate, phi, exposure).unwrap()
    }

    #[test]
    fn single_patient_table() {
        let prm = p(0.8, 0.5, 1.0);
        let table = exact_joint_pmf(1, &prm, 100).unwrap();
        assert_relative_eq!(table.prob(0, 1), zero_prob(&prm), epsilon = 1e-15);
        for t in 1..20 {
            assert_relative_eq!(table.prob(t, 0), nb_pmf(t, &prm), max_relative = 1e-12);
            assert_eq!(table.prob(t, 1), 0.0);
        }
        assert_eq!(table.prob(0, 0), 0.0);
    }

    #[test]
    fn two_poisson_patients_both_zero() {
        let table = exact_joint_pmf(2, &p(1.0, 0.0, 1.0), 60).unwrap();
        assert_relative_eq!(table.prob(0, 2), (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn zero_marginals_are_binomial() {
        let prm = p(0.8, 0.5, 1.0);
        let table = exact_joint_pmf(5, &prm, 250).unwrap();
        let pi0 = zero_prob(&prm);
        for z in 0..=5u64 {
            let mut choose = 1.0;
            for i in 0..z {
                choose = choose * (5 - i) as f64 / (i + 1) as f64;
            }
            let expect = choose * pi0.powi(z as i32) * (1.0 - pi0).powi(5 - z as i32);
            assert!((table.zero_marginal(z) - expect).abs() < 1e-10);
        }
        assert!((table.total_mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn total_pmf_matches_joint_column_sums() {
        let prm = p(0.6, 0.9, 1.2);
        let table = exact_joint_pmf(6, &prm, 200).unwrap();
        let totals = exact_total_pmf(6, &prm, 200).unwrap();
        for (t, &expect) in totals.iter().enumerate().take(60) {
            let col: f64 = (0..=6).map(|z| table.prob(t as u64, z)).sum();
            assert!((col - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_guard() {
        let prm = p(0.8, 0.5, 1.0);
        assert!(matches!(exact_joint_pmf(31, &prm, 10), Err(Error::CostGuard { .. })));
        assert!(exact_total_pmf(0, &prm, 10).is_err());
    }
}
