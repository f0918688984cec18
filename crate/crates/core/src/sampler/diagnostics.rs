//! Convergence diagnostics: Brooks-Gelman potential scale reduction factors
//! and effective sample size.

use nalgebra::DMatrix;
use serde::Serialize;

use super::engine::ChainSet;
use crate::error::{Error, Result};

pub const MIN_DRAWS_FOR_PSRF: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamPsrf {
    pub name: String,
    /// `None` for a parameter with zero within-chain variance.
    pub psrf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsrfReport {
    pub univariate: Vec<ParamPsrf>,
    /// Square root of the multivariate scale reduction, comparable to the
    /// univariate values.
    pub multivariate: Option<f64>,
    pub degenerate: Vec<String>,
}

impl PsrfReport {
    pub fn max_univariate(&self) -> Option<f64> {
        self.univariate.iter().filter_map(|p| p.psrf).reduce(f64::max)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.univariate.iter().find(|p| p.name == name).and_then(|p| p.psrf)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Univariate PSRF from per-chain sequences truncated to a common length.
/// Returns `None` when the pooled within-chain variance is zero.
pub fn psrf_univariate(chains: &[Vec<f64>]) -> Result<Option<f64>> {
    let n = check_shape(chains)?;
    let m = chains.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let w = chains.iter().map(|c| sample_var(&c[..n])).sum::<f64>() / m;
    if w <= 0.0 || !w.is_finite() {
        return Ok(None);
    }
    let b_over_n = sample_var(&means);
    let v = (nf - 1.0) / nf * w + (1.0 + 1.0 / m) * b_over_n;
    Ok(Some((v / w).sqrt()))
}

fn check_shape(chains: &[Vec<f64>]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::Diagnostic("PSRF needs at least two chains".into()));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < MIN_DRAWS_FOR_PSRF {
        return Err(Error::Diagnostic(format!(
            "PSRF needs at least {MIN_DRAWS_FOR_PSRF} draws per chain, got {n}"
        )));
    }
    Ok(n)
}

/// Multivariate PSRF over several parameters. `per_param[p][c]` is chain `c`
/// of parameter `p`. Returns the square root of
/// `(n-1)/n + (1 + 1/m) * lambda_max(W^-1 B/n)`.
pub fn psrf_multivariate(per_param: &[Vec<Vec<f64>>]) -> Result<Option<f64>> {
    let d = per_param.len();
    if d == 0 {
        return Ok(None);
    }
    let n = per_param.iter().map(|c| check_shape(c)).collect::<Result<Vec<_>>>()?;
    let n = *n.iter().min().unwrap();
    let m = per_param[0].len();
    let nf = n as f64;

    let mut within = DMatrix::<f64>::zeros(d, d);
    let mut chain_means = DMatrix::<f64>::zeros(m, d);
    for c in 0..m {
        let means: Vec<f64> = (0..d).map(|p| mean(&per_param[p][c][..n])).collect();
        for p in 0..d {
            chain_means[(c, p)] = means[p];
        }
        for t in 0..n {
            for p in 0..d {
                let dp = per_param[p][c][t] - means[p];
                for q in 0..=p {
                    within[(p, q)] += dp * (per_param[q][c][t] - means[q]);
                }
            }
        }
    }
    within /= m as f64 * (nf - 1.0);
    let grand: Vec<f64> = (0..d).map(|p| chain_means.column(p).mean()).collect();
    let mut between = DMatrix::<f64>::zeros(d, d);
    for c in 0..m {
        for p in 0..d {
            for q in 0..=p {
                between[(p, q)] += (chain_means[(c, p)] - grand[p]) * (chain_means[(c, q)] - grand[q]);
            }
        }
    }
    between /= m as f64 - 1.0;
    for p in 0..d {
        for q in 0..p {
            within[(q, p)] = within[(p, q)];
            between[(q, p)] = between[(p, q)];
        }
    }

    let Some(chol) = within.cholesky() else {
        return Ok(None);
    };
    let l_inv = match chol.l().try_inverse() {
        Some(inv) => inv,
        None => return Ok(None),
    };
    let sym = &l_inv * between * l_inv.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let lambda = sym.symmetric_eigenvalues().max();
    let r = (nf - 1.0) / nf + (1.0 + 1.0 / m as f64) * lambda;
    Ok(Some(r.sqrt()))
}

/// PSRF for the named parameters (all when `params` is empty). Degenerate
/// parameters get no value and are left out of the multivariate statistic.
pub fn psrf(chains: &ChainSet, params: &[&str]) -> Result<PsrfReport> {
    let indices: Vec<usize> = if params.is_empty() {
        (0..chains.param_names.len()).collect()
    } else {
        params
            .iter()
            .map(|p| {
                chains
                    .param_index(p)
                    .ok_or_else(|| Error::Diagnostic(format!("unknown parameter {p}")))
            })
            .collect::<Result<_>>()?
    };
    let mut univariate = Vec::new();
    let mut degenerate = Vec::new();
    let mut kept = Vec::new();
    for &i in &indices {
        let column = chains.column(i);
        let value = psrf_univariate(&column)?;
        let name = chains.param_names[i].clone();
        if value.is_none() {
            degenerate.push(name.clone());
        } else {
            kept.push(column);
        }
        univariate.push(ParamPsrf { name, psrf: value });
    }
    let multivariate = psrf_multivariate(&kept)?;
    Ok(PsrfReport { univariate, multivariate, degenerate })
}

fn autocovariance(xs: &[f64], lag: usize, mean: f64) -> f64 {
    let n = xs.len();
    xs[..n - lag].iter().zip(&xs[lag..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / n as f64
}

/// Effective sample size across chains, using the chain-averaged
/// autocorrelation truncated by Geyer's initial monotone sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let chains: Vec<&[f64]> = chains.iter().map(Vec::as_slice).filter(|c| c.len() > 3).collect();
    if chains.is_empty() {
        return 0.0;
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap();
    let m = chains.len() as f64;
    let total = m * n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let gamma0: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| autocovariance(&c[..n], 0, mu)).collect();
    let within = gamma0.iter().sum::<f64>() / m * n as f64 / (n as f64 - 1.0);
    let between = if chains.len() > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * within + between;
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return total;
    }
    let rho = |lag: usize| {
        let mean_cov = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocovariance(&c[..n], lag, mu))
            .sum::<f64>()
            / m;
        1.0 - (within - mean_cov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    total / tau.max(1.0 / total.log10())
}
