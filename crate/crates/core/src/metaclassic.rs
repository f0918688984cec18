//! Classical random-effects meta-analysis of log rate ratios, and the relation
//! between rate ratios and odds ratios of at least one event.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{domain, Error, Result};
use crate::evidence::ArmRecord;
use crate::nbcore::log_zero_prob_raw;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub study_id: String,
    pub log_effect: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tau2Estimator {
    /// Moment estimator of DerSimonian and Laird, truncated at zero.
    #[serde(rename = "dl")]
    DerSimonianLaird,
    /// Restricted maximum likelihood, solved by fixed-point iteration.
    Reml,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledResult {
    pub estimator: Tau2Estimator,
    pub pooled_log_effect: f64,
    pub std_err: f64,
    pub tau_sq: f64,
    /// 95% interval on the ratio scale.
    pub ci95: (f64, f64),
    /// Normalized random-effects weights, in input order.
    pub weights: Vec<f64>,
}

impl PooledResult {
    pub fn ratio(&self) -> f64 {
        self.pooled_log_effect.exp()
    }
}

/// Log rate ratio of `active` over `placebo` with a delta-method standard error.
pub fn rate_ratio_estimate(study_id: &str, placebo: &ArmRecord, active: &ArmRecord) -> Result<EffectEstimate> {
    let (Some(rp), Some(sp)) = (placebo.rate_est, placebo.std_err) else {
        return Err(Error::Routing(format!("{study_id}: placebo arm lacks rate or standard error")));
    };
    let (Some(ra), Some(sa)) = (active.rate_est, active.std_err) else {
        return Err(Error::Routing(format!("{study_id}: active arm lacks rate or standard error")));
    };
    let log_effect = (ra / rp).ln();
    let std_err = ((sa / ra).powi(2) + (sp / rp).powi(2)).sqrt();
    Ok(EffectEstimate { study_id: study_id.to_string(), log_effect, std_err })
}

fn validate(estimates: &[EffectEstimate]) -> Result<()> {
    if estimates.is_empty() {
        return Err(domain("no estimates to pool"));
    }
    for e in estimates {
        if !(e.std_err.is_finite() && e.std_err > 0.0 && e.log_effect.is_finite()) {
            return Err(domain(format!("{}: invalid estimate", e.study_id)));
        }
    }
    Ok(())
}

fn combine(estimates: &[EffectEstimate], tau_sq: f64, estimator: Tau2Estimator) -> PooledResult {
    let w: Vec<f64> = estimates.iter().map(|e| 1.0 / (e.std_err * e.std_err + tau_sq)).collect();
    let sw: f64 = w.iter().sum();
    let pooled = estimates.iter().zip(&w).map(|(e, wi)| wi * e.log_effect).sum::<f64>() / sw;
    let se = sw.recip().sqrt();
    let z = Normal::standard().inverse_cdf(0.975);
    PooledResult {
        estimator,
        pooled_log_effect: pooled,
        std_err: se,
        tau_sq,
        ci95: ((pooled - z * se).exp(), (pooled + z * se).exp()),
        weights: w.iter().map(|wi| wi / sw).collect(),
    }
}

pub fn dl_pool(estimates: &[EffectEstimate]) -> Result<PooledResult> {
    validate(estimates)?;
    let w: Vec<f64> = estimates.iter().map(|e| e.std_err.powi(-2)).collect();
    let sw: f64 = w.iter().sum();
    let fixed = estimates.iter().zip(&w).map(|(e, wi)| wi * e.log_effect).sum::<f64>() / sw;
    let q: f64 = estimates.iter().zip(&w).map(|(e, wi)| wi * (e.log_effect - fixed).powi(2)).sum();
    let c = sw - w.iter().map(|wi| wi * wi).sum::<f64>() / sw;
    let df = (estimates.len() - 1) as f64;
    let tau_sq = if c > 0.0 { ((q - df) / c).max(0.0) } else { 0.0 };
    Ok(combine(estimates, tau_sq, Tau2Estimator::DerSimonianLaird))
}

pub fn reml_pool(estimates: &[EffectEstimate]) -> Result<PooledResult> {
    validate(estimates)?;
    let mut tau_sq = dl_pool(estimates)?.tau_sq;
    for _ in 0..10_000 {
        let w: Vec<f64> = estimates.iter().map(|e| 1.0 / (e.std_err.powi(2) + tau_sq)).collect();
        let sw: f64 = w.iter().sum();
        let mu = estimates.iter().zip(&w).map(|(e, wi)| wi * e.log_effect).sum::<f64>() / sw;
        let num: f64 = estimates
            .iter()
            .zip(&w)
            .map(|(e, wi)| wi * wi * ((e.log_effect - mu).powi(2) - e.std_err.powi(2)))
            .sum();
        let den: f64 = w.iter().map(|wi| wi * wi).sum();
        let next = (num / den + 1.0 / sw).max(0.0);
        if (next - tau_sq).abs() < 1e-14 * (1.0 + tau_sq) {
            return Ok(combine(estimates, next, Tau2Estimator::Reml));
        }
        tau_sq = next;
    }
    Err(Error::Diagnostic("REML iteration for tau^2 did not converge".into()))
}

pub fn pool(estimates: &[EffectEstimate], estimator: Tau2Estimator) -> Result<PooledResult> {
    match estimator {
        Tau2Estimator::DerSimonianLaird => dl_pool(estimates),
        Tau2Estimator::Reml => reml_pool(estimates),
    }
}

fn check_positive(values: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in values {
        if !(v.is_finite() && v > 0.0) {
            return Err(domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Odds ratio of at least one event under a Poisson model when the rate is
/// multiplied by `theta`.
pub fn poisson_odds_ratio(theta: f64, rate: f64, duration: f64) -> Result<f64> {
    check_positive(&[("theta", theta), ("rate", rate), ("duration", duration)])?;
    let m = rate * duration;
    Ok((theta * m).exp_m1() / m.exp_m1())
}

/// Negative-binomial counterpart of [`poisson_odds_ratio`]; equal to `theta`
/// whenever the overdispersion is one.
pub fn nb_odds_ratio(theta: f64, rate: f64, duration: f64, overdispersion: f64) -> Result<f64> {
    check_positive(&[("theta", theta), ("rate", rate), ("duration", duration)])?;
    if !(overdispersion.is_finite() && overdispersion >= 0.0) {
        return Err(domain(format!("overdispersion must be non-negative, got {overdispersion}")));
    }
    if overdispersion == 0.0 {
        return poisson_odds_ratio(theta, rate, duration);
    }
    if overdispersion == 1.0 {
        // The odds reduce to the mean itself, so the ratio is theta m / m.
        return Ok(theta);
    }
    let m = rate * duration;
    // (1 + phi m)^(1/phi) - 1 = expm1(-log P(X = 0))
    let odds = |mean: f64| (-log_zero_prob_raw(mean, overdispersion)).exp_m1();
    Ok(odds(theta * m) / odds(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::TreatmentClass;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Poisson};

    fn arm(rate: f64, se: f64) -> ArmRecord {
        ArmRecord {
            treatment: TreatmentClass::Placebo,
            n_patients: 100,
            rate_est: Some(rate),
            std_err: Some(se),
            total: None,
            zeroes: None,
        }
    }

    fn est(id: &str, y: f64, se: f64) -> EffectEstimate {
        EffectEstimate { study_id: id.into(), log_effect: y, std_err: se }
    }

    #[test]
    fn rate_ratio_examples() {
        let same = rate_ratio_estimate("x", &arm(1.2, 0.1), &arm(1.2, 0.1)).unwrap();
        assert_eq!(same.log_effect, 0.0);
        let tashkin = rate_ratio_estimate("Tashkin", &arm(0.85, 0.02), &arm(0.73, 0.02)).unwrap();
        assert_relative_eq!(tashkin.log_effect, -0.152_191_8, epsilon = 1e-7);
        assert_relative_eq!(tashkin.std_err, 0.036_114_3, epsilon = 1e-7);
        let doubled = rate_ratio_estimate("Tashkin", &arm(1.7, 0.04), &arm(1.46, 0.04)).unwrap();
        assert_relative_eq!(doubled.log_effect, tashkin.log_effect, epsilon = 1e-14);
        assert_relative_eq!(doubled.std_err, tashkin.std_err, epsilon = 1e-14);
        let mut no_se = arm(1.0, 0.1);
        no_se.std_err = None;
        assert!(matches!(rate_ratio_estimate("x", &no_se, &arm(1.0, 0.1)), Err(Error::Routing(_))));
    }

    #[test]
    fn pooling_single_and_identical() {
        for estimator in [Tau2Estimator::DerSimonianLaird, Tau2Estimator::Reml] {
            let one = pool(&[est("a", -0.3, 0.2)], estimator).unwrap();
            assert_relative_eq!(one.pooled_log_effect, -0.3, epsilon = 1e-15);
            assert_relative_eq!(one.std_err, 0.2, epsilon = 1e-15);
            assert_eq!(one.tau_sq, 0.0);
            let many: Vec<_> = (0..9).map(|i| est(&i.to_string(), -0.3, 0.2)).collect();
            let r = pool(&many, estimator).unwrap();
            assert_relative_eq!(r.pooled_log_effect, -0.3, epsilon = 1e-14);
            assert_relative_eq!(r.std_err, 0.2 / 3.0, epsilon = 1e-14);
            assert_eq!(r.tau_sq, 0.0);
        }
        assert!(dl_pool(&[]).is_err());
    }

    #[test]
    fn weights_normalized_and_estimate_bracketed() {
        let xs = [est("a", -0.5, 0.1), est("b", 0.2, 0.3), est("c", -0.1, 0.05), est("d", -0.8, 0.4)];
        for estimator in [Tau2Estimator::DerSimonianLaird, Tau2Estimator::Reml] {
            let r = pool(&xs, estimator).unwrap();
            assert_relative_eq!(r.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            assert!(r.pooled_log_effect >= -0.8 && r.pooled_log_effect <= 0.2);
            assert!(r.ci95.0 < r.ratio() && r.ratio() < r.ci95.1);
            assert!(r.tau_sq > 0.0);
        }
    }

    #[test]
    fn poisson_odds_ratio_examples() {
        assert_relative_eq!(poisson_odds_ratio(0.7, 1e-8, 1.0).unwrap(), 0.7, max_relative = 1e-6);
        assert_relative_eq!(poisson_odds_ratio(1.0, 1.3, 0.5).unwrap(), 1.0, epsilon = 1e-15);
        let expect = (0.5f64.exp() - 1.0) / (1f64.exp() - 1.0);
        assert_relative_eq!(poisson_odds_ratio(0.5, 1.0, 1.0).unwrap(), expect, epsilon = 1e-15);
        assert_relative_eq!(expect, 0.37754, epsilon = 1e-5);
    }

    #[test]
    fn poisson_odds_ratio_matches_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400_000;
        let odds = |mean: f64, rng: &mut ChaCha8Rng| {
            let d = Poisson::new(mean).unwrap();
            let zeros = (0..n).filter(|_| d.sample(rng) == 0.0).count() as f64;
            (n as f64 - zeros) / zeros
        };
        let simulated = odds(0.5, &mut rng) / odds(1.0, &mut rng);
        assert!((simulated - 0.37754).abs() < 0.01, "{simulated}");
    }

    #[test]
    fn nb_odds_ratio_identities() {
        for &m in &[0.1, 0.9, 3.0, 10.0] {
            assert_eq!(nb_odds_ratio(0.73, m, 1.0, 1.0).unwrap(), 0.73);
            // Just off one the general formula takes over and stays continuous.
            assert_relative_eq!(nb_odds_ratio(0.73, m, 1.0, 1.0 + 1e-9).unwrap(), 0.73, max_relative = 1e-8);
        }
        assert_relative_eq!(nb_odds_ratio(0.6, 1e-8, 1.0, 0.5).unwrap(), 0.6, max_relative = 1e-6);
        assert_eq!(nb_odds_ratio(0.6, 1.0, 1.0, 0.0).unwrap(), poisson_odds_ratio(0.6, 1.0, 1.0).unwrap());
        for &theta in &[0.3, 0.73, 1.4] {
            for &m in &[0.2, 1.0, 4.0] {
                let near = nb_odds_ratio(theta, m, 1.0, 1e-10).unwrap();
                let poisson = poisson_odds_ratio(theta, m, 1.0).unwrap();
                assert!((near - poisson).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nb_odds_ratio_ordering() {
        for &theta in &[0.5, 0.8] {
            for &m in &[0.5, 1.0, 2.0] {
                assert!(nb_odds_ratio(theta, m, 1.0, 0.25).unwrap() < theta);
                assert_eq!(nb_odds_ratio(theta, m, 1.0, 1.0).unwrap(), theta);
                assert!(nb_odds_ratio(theta, m, 1.0, 2.0).unwrap() > theta);
            }
        }
    }

    #[test]
    fn nb_odds_ratio_matches_simulation() {
        let (theta, m, phi) = (0.73, 0.9, 0.5);
        let exact = nb_odds_ratio(theta, m, 1.0, phi).unwrap();
        assert!(exact < theta);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200_000usize;
        let mut draw_zero_frac = |mean: f64| {
            let mix = Gamma::new(1.0 / phi, mean * phi).unwrap();
            let zeros = (0..n)
                .filter(|_| Poisson::new(mix.sample(&mut rng)).unwrap().sample(&mut rng) == 0.0)
                .count();
            zeros as f64 / n as f64
        };
        let p_active = draw_zero_frac(theta * m);
        let p_placebo = draw_zero_frac(m);
        let simulated = ((1.0 - p_active) / p_active) / ((1.0 - p_placebo) / p_placebo);
        // Delta-method standard error of a log odds ratio from two binomial samples.
        let se_log = (1.0 / (n as f64 * p_active * (1.0 - p_active))
            + 1.0 / (n as f64 * p_placebo * (1.0 - p_placebo)))
            .sqrt();
        assert!((simulated.ln() - exact.ln()).abs() < 3.0 * se_log, "{simulated} vs {exact}");
    }
}
