//! Poisson and negative-binomial count probabilities.
//!
//! Every quantity is parameterized by a rate per unit time, an overdispersion
//! and an exposure duration. The per-subject count has mean `m = exposure * rate`
//! and variance `m (1 + overdispersion * m)`; overdispersion zero is the Poisson
//! model. The negative binomial arises as a Poisson whose rate is Gamma
//! distributed with mean `rate` and variance `rate^2 * overdispersion`.

mod exact;
mod likelihood;
mod mle;

pub use exact::{exact_joint_pmf, exact_total_pmf, zero_truncated_pmf, JointPmfTable, MAX_EXACT_PATIENTS};
pub use likelihood::{
    joint_log_lik, log_binomial_pmf, normal_log_density, total_only_log_lik, zero_only_log_lik,
    AggregateObservation, ZeroCount,
};
pub use mle::{mle_fit, MleFit};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Result};

/// Below this overdispersion the zero probability switches to a series expansion
/// of `(1 + phi m)^(-1/phi)`.
pub const PHI_SERIES_THRESHOLD: f64 = 1e-8;

/// Counts above this use `ln_gamma` differences instead of the product form.
const PRODUCT_FORM_MAX_COUNT: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbParams {
    rate: f64,
    overdispersion: f64,
    exposure: f64,
}

impl NbParams {
    pub fn new(rate: f64, overdispersion: f64, exposure: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(domain(format!("rate must be finite and positive, got {rate}")));
        }
        if !(overdispersion.is_finite() && overdispersion >= 0.0) {
            return Err(domain(format!(
                "overdispersion must be finite and non-negative, got {overdispersion}"
            )));
        }
        if !(exposure.is_finite() && exposure > 0.0) {
            return Err(domain(format!("exposure must be finite and positive, got {exposure}")));
        }
        Ok(Self { rate, overdispersion, exposure })
    }

    pub fn poisson(rate: f64, exposure: f64) -> Result<Self> {
        Self::new(rate, 0.0, exposure)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn overdispersion(&self) -> f64 {
        self.overdispersion
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    /// Expected count per subject, `exposure * rate`.
    pub fn mean(&self) -> f64 {
        self.exposure * self.rate
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        m * (1.0 + self.overdispersion * m)
    }

    /// `log P(X = 0)`.
    pub fn log_zero_prob(&self) -> f64 {
        log_zero_prob_raw(self.mean(), self.overdispersion)
    }
}

/// `log (1 + phi m)^(-1/phi)`, or `-m` at `phi = 0`.
pub(crate) fn log_zero_prob_raw(m: f64, phi: f64) -> f64 {
    if phi < PHI_SERIES_THRESHOLD {
        // -log1p(phi m) / phi = -m (1 - phi m / 2 + (phi m)^2 / 3 - ...)
        let x = phi * m;
        -m * (1.0 - x / 2.0 + x * x / 3.0)
    } else {
        -(phi * m).ln_1p() / phi
    }
}

pub fn poisson_log_pmf(x: u64, mean: f64) -> f64 {
    let xf = x as f64;
    if x == 0 {
        return -mean;
    }
    xf * mean.ln() - mean - ln_gamma(xf + 1.0)
}

/// `log P(X = x)` for one subject's count.
pub fn nb_log_pmf(x: u64, params: &NbParams) -> f64 {
    let m = params.mean();
    let phi = params.overdispersion;
    if phi == 0.0 {
        return poisson_log_pmf(x, m);
    }
    let log_p0 = log_zero_prob_raw(m, phi);
    if x == 0 {
        return log_p0;
    }
    let xf = x as f64;
    let log1p_phim = (phi * m).ln_1p();
    let rising = if x <= PRODUCT_FORM_MAX_COUNT {
        // log prod_{j<x} (1 + phi j)
        (1..x).map(|j| (phi * j as f64).ln_1p()).sum::<f64>()
    } else {
        let r = 1.0 / phi;
        ln_gamma(xf + r) - ln_gamma(r) + xf * phi.ln()
    };
    rising - xf * log1p_phim + xf * m.ln() - ln_gamma(xf + 1.0) + log_p0
}

pub fn nb_pmf(x: u64, params: &NbParams) -> f64 {
    nb_log_pmf(x, params).exp()
}

/// Probability that a single subject has no events.
pub fn zero_prob(params: &NbParams) -> f64 {
    params.log_zero_prob().exp()
}

/// Mean and variance of the total count over `n` subjects.
pub fn total_count_moments(n: u64, params: &NbParams) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(domain("number of patients must be positive"));
    }
    let nf = n as f64;
    Ok((nf * params.mean(), nf * params.variance()))
}

/// Moments of the count conditional on at least one event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncatedMoments {
    pub zero_prob: f64,
    pub trunc_mean: f64,
    pub trunc_var: f64,
}

/// Below this mean the closed-form conditional variance loses too many digits to
/// cancellation and the moments are summed directly.
const SMALL_MEAN_SERIES: f64 = 1e-3;

/// Conditional variance used for the zero-truncated count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TruncatedVariance {
    /// `Var(X | X > 0)`.
    #[default]
    Exact,
    /// The closed form `theta + m^2 (2 p0^2 - (1 + phi) p0 + phi) / (1 - p0)^2`,
    /// which exceeds the exact value by `2 (theta - m)^2`. Kept to reproduce
    /// analyses that used it.
    AsPublished,
}

pub fn truncated_moments(params: &NbParams) -> Result<TruncatedMoments> {
    truncated_moments_with(params, TruncatedVariance::Exact)
}

pub fn truncated_moments_with(params: &NbParams, form: TruncatedVariance) -> Result<TruncatedMoments> {
    let m = params.mean();
    if !(m > 0.0) {
        return Err(domain("truncation undefined for zero mean"));
    }
    let phi = params.overdispersion;
    let log_p0 = params.log_zero_prob();
    let p0 = log_p0.exp();
    let p_pos = -log_p0.exp_m1();
    let trunc_mean = m / p_pos;
    let mut moments = if m < SMALL_MEAN_SERIES {
        small_mean_moments(params, p0, p_pos, trunc_mean)
    } else {
        // Var(X | X > 0) = (Var X - m^2 p0) / (1 - p0) - (m p0 / (1 - p0))^2
        let trunc_var = trunc_mean + m * m * (phi - (1.0 + phi) * p0) / (p_pos * p_pos);
        TruncatedMoments { zero_prob: p0, trunc_mean, trunc_var }
    };
    if form == TruncatedVariance::AsPublished {
        let excess = m * p0 / p_pos;
        moments.trunc_var += 2.0 * excess * excess;
    }
    Ok(moments)
}

fn small_mean_moments(params: &NbParams, p0: f64, p_pos: f64, trunc_mean: f64) -> TruncatedMoments {
    // Terms decay at least geometrically in m; a few dozen suffice.
    let mut var = 0.0;
    let mut mass = 0.0;
    for j in 1..200u64 {
        let p = nb_pmf(j, params) / p_pos;
        let d = j as f64 - trunc_mean;
        var += d * d * p;
        mass += p;
        if 1.0 - mass < 1e-17 || p < 1e-300 {
            break;
        }
    }
    TruncatedMoments { zero_prob: p0, trunc_mean, trunc_var: var }
}
