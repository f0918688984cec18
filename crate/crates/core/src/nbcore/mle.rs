use std::collections::BTreeMap;

use serde::Serialize;

use super::{nb_log_pmf, NbParams, PHI_SERIES_THRESHOLD};
use crate::error::{domain, Error, Result};

/// Maximum-likelihood fit of a common rate and overdispersion to individual counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MleFit {
    pub rate: f64,
    pub overdispersion: f64,
    pub se_rate: f64,
    /// `None` when the fit sits on the Poisson boundary.
    pub se_overdispersion: Option<f64>,
    pub loglik: f64,
    pub at_boundary: bool,
}

const LOG_PHI_MIN: f64 = -18.420_680_743_952_367; // ln 1e-8
const LOG_PHI_MAX: f64 = 9.210_340_371_976_184; // ln 1e4
const GRID_POINTS: usize = 121;

struct Histogram(BTreeMap<u64, u64>);

impl Histogram {
    fn loglik(&self, rate: f64, phi: f64, exposure: f64) -> f64 {
        let Ok(params) = NbParams::new(rate, phi, exposure) else {
            return f64::NEG_INFINITY;
        };
        self.0.iter().map(|(&x, &c)| c as f64 * nb_log_pmf(x, &params)).sum()
    }
}

/// Fits rate and overdispersion with all subjects sharing `exposure`.
///
/// With a common exposure the rate MLE is the sample mean over exposure for
/// every overdispersion, so the overdispersion is found on the profile
/// likelihood. When the profile increases toward zero the fit collapses to
/// the Poisson model.
pub fn mle_fit(counts: &[u64], exposure: f64) -> Result<MleFit> {
    if counts.len() < 2 {
        return Err(domain("need at least two counts"));
    }
    if !(exposure.is_finite() && exposure > 0.0) {
        return Err(domain(format!("exposure must be positive, got {exposure}")));
    }
    let sum: u64 = counts.iter().sum();
    if sum == 0 {
        return Err(Error::DegenerateFit("all counts are zero; rate MLE is on the boundary".into()));
    }
    let n = counts.len() as f64;
    let rate = sum as f64 / n / exposure;

    let mut hist = BTreeMap::new();
    for &c in counts {
        *hist.entry(c).or_insert(0u64) += 1;
    }
    let hist = Histogram(hist);
    let profile = |log_phi: f64| hist.loglik(rate, log_phi.exp(), exposure);

    let step = (LOG_PHI_MAX - LOG_PHI_MIN) / (GRID_POINTS - 1) as f64;
    let (best_idx, _) = (0..GRID_POINTS)
        .map(|i| (i, profile(LOG_PHI_MIN + i as f64 * step)))
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });

    let poisson_loglik = hist.loglik(rate, 0.0, exposure);
    let lo = LOG_PHI_MIN + best_idx.saturating_sub(1) as f64 * step;
    let hi = LOG_PHI_MIN + (best_idx + 1).min(GRID_POINTS - 1) as f64 * step;
    let log_phi = golden_max(profile, lo, hi, 1e-10);
    let phi = log_phi.exp();
    let nb_loglik = profile(log_phi);

    if best_idx == 0 || phi < PHI_SERIES_THRESHOLD * 10.0 || nb_loglik <= poisson_loglik {
        return Ok(MleFit {
            rate,
            overdispersion: 0.0,
            se_rate: (rate / (n * exposure)).sqrt(),
            se_overdispersion: None,
            loglik: poisson_loglik,
            at_boundary: true,
        });
    }

    let (var_rate, var_phi) = inverse_hessian_diagonal(|r, f| hist.loglik(r, f, exposure), rate, phi)?;
    Ok(MleFit {
        rate,
        overdispersion: phi,
        se_rate: var_rate.sqrt(),
        se_overdispersion: Some(var_phi.sqrt()),
        loglik: nb_loglik,
        at_boundary: false,
    })
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Diagonal of the inverse observed information by central differences.
fn inverse_hessian_diagonal(f: impl Fn(f64, f64) -> f64, x: f64, y: f64) -> Result<(f64, f64)> {
    let hx = 1e-3 * x;
    let hy = 1e-3 * y;
    let f0 = f(x, y);
    let fxx = (f(x + hx, y) - 2.0 * f0 + f(x - hx, y)) / (hx * hx);
    let fyy = (f(x, y + hy) - 2.0 * f0 + f(x, y - hy)) / (hy * hy);
    let fxy = (f(x + hx, y + hy) - f(x + hx, y - hy) - f(x - hx, y + hy) + f(x - hx, y - hy))
        / (4.0 * hx * hy);
    // Information = -Hessian.
    let (a, b, d) = (-fxx, -fxy, -fyy);
    let det = a * d - b * b;
    if !(det > 0.0 && a > 0.0) {
        return Err(Error::DegenerateFit("observed information is not positive definite".into()));
    }
    Ok((d / det, a / det))
}
