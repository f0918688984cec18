//! `classic`: random-effects pooling of per-study log rate ratios.

use std::fmt::Write as _;

use nbsynth::evidence::{select_subset, StudyRecord, SubsetLabel};
use nbsynth::metaclassic::{pool, rate_ratio_estimate, EffectEstimate, PooledResult, Tau2Estimator};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn parse_tau2(s: &str) -> CliResult<Tau2Estimator> {
    match s {
        "reml" => Ok(Tau2Estimator::Reml),
        "dl" => Ok(Tau2Estimator::DerSimonianLaird),
        other => Err(CliError::Usage(format!("unknown tau^2 estimator '{other}', expected reml or dl"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyEffect {
    #[serde(flatten)]
    pub estimate: EffectEstimate,
    pub ratio: f64,
    pub ci95: (f64, f64),
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassicReport {
    pub subset: SubsetLabel,
    pub studies: Vec<StudyEffect>,
    pub pooled: PooledResult,
    pub pooled_ratio: f64,
    /// Studies in the subset without a rate and standard error on every arm.
    pub skipped: Vec<String>,
}

/// One estimate per active arm of each study whose arms all carry a rate and
/// standard error. Multi-arm studies get `#k` appended to the study name.
pub fn effect_estimates(studies: &[StudyRecord]) -> (Vec<EffectEstimate>, Vec<String>) {
    let mut estimates = Vec::new();
    let mut skipped = Vec::new();
    for study in studies {
        if !study.arms.iter().all(|a| a.has_rate_se()) {
            skipped.push(study.study_id.clone());
            continue;
        }
        let placebo = study.placebo();
        let actives: Vec<_> = study.active_arms().collect();
        for (k, arm) in actives.iter().enumerate() {
            let id = if actives.len() > 1 { format!("{}#{}", study.study_id, k + 1) } else { study.study_id.clone() };
            match rate_ratio_estimate(&id, placebo, arm) {
                Ok(e) => estimates.push(e),
                Err(_) => skipped.push(id),
            }
        }
    }
    (estimates, skipped)
}

pub fn classic_studies(studies: &[StudyRecord], subset: SubsetLabel, tau2: Tau2Estimator) -> CliResult<ClassicReport> {
    let selected = select_subset(studies, subset);
    let (estimates, skipped) = effect_estimates(&selected);
    if estimates.is_empty() {
        return Err(CliError::Invalid(format!("no eligible studies in subset {subset}")));
    }
    let pooled = pool(&estimates, tau2)?;
    let studies = estimates
        .into_iter()
        .zip(&pooled.weights)
        .map(|(e, &w)| {
            let half = 1.959_963_984_540_054 * e.std_err;
            StudyEffect {
                ratio: e.log_effect.exp(),
                ci95: ((e.log_effect - half).exp(), (e.log_effect + half).exp()),
                weight: w,
                estimate: e,
            }
        })
        .collect();
    Ok(ClassicReport { subset, studies, pooled_ratio: pooled.ratio(), pooled, skipped })
}

pub fn render_table(r: &ClassicReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>8} {:>16} {:>8}", "study", "ratio", "95% CI", "weight");
    for e in &r.studies {
        let _ = writeln!(
            s,
            "{:<28} {:>8.3} {:>16} {:>7.1}%",
            e.estimate.study_id,
            e.ratio,
            format!("[{:.3}, {:.3}]", e.ci95.0, e.ci95.1),
            100.0 * e.weight
        );
    }
    let label = match r.pooled.estimator {
        Tau2Estimator::Reml => "pooled (REML)",
        Tau2Estimator::DerSimonianLaird => "pooled (DL)",
    };
    let _ = writeln!(
        s,
        "{:<28} {:>8.3} {:>16}",
        label,
        r.pooled_ratio,
        format!("[{:.3}, {:.3}]", r.pooled.ci95.0, r.pooled.ci95.1)
    );
    let _ = writeln!(s, "tau^2 = {:.5}", r.pooled.tau_sq);
    if !r.skipped.is_empty() {
        let _ = writeln!(s, "skipped (no rate/SE): {}", r.skipped.join(", "));
    }
    s
}
