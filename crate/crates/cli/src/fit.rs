//! `fit`: hierarchical model plus sampler on one subset, and its artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nbsynth::evidence::{select_subset, StudyRecord, SubsetLabel};
use nbsynth::hiermodel::{HierModel, PriorSpec};
use nbsynth::nbcore::TruncatedVariance;
use nbsynth::sampler::{
    chain_seeds, posterior_predictive, psrf, psrf_univariate, run_chains, summarize, ChainSet, DensityGrid,
    HyperSample, PosteriorSummary, PredictiveDraw, SamplerConfig,
};
use serde::Serialize;

use crate::config::{FitSettings, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output;

/// Sampled hyperparameters, in model order.
pub const HYPER_PARAMS: [&str; 5] = ["mu_lambda", "log_sigma_lambda", "mu_phi", "log_sigma_phi", "log_sigma_psi"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamStats {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
    pub q975: f64,
    pub ess: f64,
    pub psrf: Option<f64>,
}

impl ParamStats {
    fn new(s: &PosteriorSummary, psrf: Option<f64>) -> Self {
        Self {
            median: s.median,
            mean: s.mean,
            sd: s.sd,
            q025: s.q025,
            q05: s.q05,
            q25: s.q25,
            q75: s.q75,
            q95: s.q95,
            q975: s.q975,
            ess: s.ess,
            psrf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub subset: SubsetLabel,
    pub n_studies: usize,
    pub n_arms: usize,
    pub studies: Vec<String>,
    pub chains: usize,
    pub iterations: usize,
    pub burn_in_fraction: f64,
    pub thinning: usize,
    pub draws_per_chain: usize,
    pub seed: u64,
    pub chain_seeds: Vec<u64>,
    pub se_arms: String,
    pub trunc_var: String,
    pub priors_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsrfSection {
    pub threshold: f64,
    pub max_univariate: Option<f64>,
    pub multivariate: Option<f64>,
    pub hyperparameters: BTreeMap<String, Option<f64>>,
    pub degenerate: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub run: RunInfo,
    /// Treatment effect on the rate-ratio scale.
    pub theta: ParamStats,
    /// Natural-scale hyperparameters: medians of rate and overdispersion, and
    /// the three spreads.
    pub hyperparameters: BTreeMap<String, ParamStats>,
    /// Every sampled coordinate on its sampling scale.
    pub parameters: BTreeMap<String, ParamStats>,
    pub psrf: PsrfSection,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub acceptance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub summary: FitSummary,
    pub chains: ChainSet,
    pub densities: Vec<(String, DensityGrid)>,
    pub predictive: Vec<PredictiveDraw>,
    pub report: String,
}

pub fn trunc_var_name(form: TruncatedVariance) -> &'static str {
    match form {
        TruncatedVariance::Exact => "exact",
        TruncatedVariance::AsPublished => "published",
    }
}

fn exp_chains(chains: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    chains.into_iter().map(|c| c.into_iter().map(f64::exp).collect()).collect()
}

/// Lognormal prior density of the rate ratio, evaluated on `x`.
fn theta_prior_grid(x: &[f64], sd: f64) -> DensityGrid {
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let density = x
        .iter()
        .map(|&v| if v > 0.0 { norm * (-0.5 * (v.ln() / sd).powi(2)).exp() / v } else { 0.0 })
        .collect();
    DensityGrid { x: x.to_vec(), density, bandwidth: 0.0 }
}

/// Fits the selected subset of `studies` in memory.
pub fn fit_studies(studies: &[StudyRecord], settings: &FitSettings) -> CliResult<FitOutput> {
    settings.validate()?;
    let selected = select_subset(studies, settings.subset);
    if selected.is_empty() {
        return Err(CliError::Invalid(format!("no studies in subset {}", settings.subset)));
    }
    let priors = PriorSpec::default();
    let mut model = HierModel::new(&selected, priors, settings.se_arms)?.with_truncated_variance(settings.trunc_var);
    if settings.priors_only {
        model = model.priors_only();
    }
    let config = SamplerConfig {
        n_iterations: settings.iterations,
        burn_in_fraction: settings.burn_in_fraction,
        thinning: settings.thinning,
        ..SamplerConfig::default()
    };
    let seeds = chain_seeds(settings.seed, settings.chains);
    let set = run_chains(&model, &config, &seeds)?;

    let report = psrf(&set, &[])?;
    let mut parameters = BTreeMap::new();
    for (i, name) in set.param_names.iter().enumerate() {
        let s = summarize(name, &set.column(i));
        parameters.insert(name.clone(), ParamStats::new(&s, report.univariate[i].psrf));
    }

    let theta_chains = exp_chains(set.column(model.idx_log_theta()));
    let theta_summary = summarize("theta", &theta_chains);
    let theta = ParamStats::new(&theta_summary, psrf_univariate(&theta_chains)?);

    let mut densities = Vec::new();
    if let Some(grid) = &theta_summary.density {
        densities.push(("theta".to_string(), grid.clone()));
        densities.push(("theta_prior".to_string(), theta_prior_grid(&grid.x, priors.log_theta_sd)));
    }
    let mut hyperparameters = BTreeMap::new();
    let hyper_idx = model.idx_hyper();
    for (offset, sampled) in HYPER_PARAMS.iter().enumerate() {
        let natural = match *sampled {
            "mu_lambda" => "exp_mu_lambda".to_string(),
            "mu_phi" => "exp_mu_phi".to_string(),
            other => other.trim_start_matches("log_").to_string(),
        };
        let column = exp_chains(set.column(hyper_idx + offset));
        let s = summarize(&natural, &column);
        hyperparameters.insert(natural.clone(), ParamStats::new(&s, psrf_univariate(&column)?));
        for (name, summary) in [(sampled.to_string(), summarize(sampled, &set.column(hyper_idx + offset))), (natural, s)] {
            if let Some(grid) = summary.density {
                densities.push((name, grid));
            }
        }
    }

    let hyper_psrf: BTreeMap<String, Option<f64>> = HYPER_PARAMS
        .iter()
        .chain(std::iter::once(&"log_theta"))
        .map(|p| (p.to_string(), report.get(p)))
        .collect();
    let max_univariate = report.max_univariate();
    let converged = max_univariate.is_some_and(|r| r <= settings.psrf_threshold);
    let mut warnings = Vec::new();
    if !converged {
        let worst: Vec<String> = report
            .univariate
            .iter()
            .filter(|p| p.psrf.is_some_and(|r| r > settings.psrf_threshold))
            .map(|p| format!("{} {:.4}", p.name, p.psrf.unwrap_or(f64::NAN)))
            .collect();
        warnings.push(format!(
            "PSRF above {} for {} parameter(s): {}",
            settings.psrf_threshold,
            worst.len(),
            worst.join(", ")
        ));
    }
    if !report.degenerate.is_empty() {
        warnings.push(format!("no within-chain movement in {}", report.degenerate.join(", ")));
    }

    let mut acceptance = BTreeMap::new();
    for (m, first) in set.chains[0].acceptance.iter().enumerate() {
        let (acc, prop) = set
            .chains
            .iter()
            .fold((0u64, 0u64), |(a, p), c| (a + c.acceptance[m].accepted, p + c.acceptance[m].proposed));
        acceptance.insert(first.name.clone(), if prop == 0 { 0.0 } else { acc as f64 / prop as f64 });
    }

    let hyper_samples: Vec<HyperSample> = set
        .chains
        .iter()
        .flat_map(|c| c.draws.iter())
        .map(|row| HyperSample {
            mu_lambda: row[hyper_idx],
            sigma_lambda: row[hyper_idx + 1].exp(),
            mu_phi: row[hyper_idx + 2],
            sigma_phi: row[hyper_idx + 3].exp(),
        })
        .collect();
    let predictive = posterior_predictive(&hyper_samples, 1, settings.seed);

    let summary = FitSummary {
        run: RunInfo {
            subset: settings.subset,
            n_studies: selected.len(),
            n_arms: model.n_arms(),
            studies: selected.iter().map(|s| s.study_id.clone()).collect(),
            chains: settings.chains,
            iterations: settings.iterations,
            burn_in_fraction: settings.burn_in_fraction,
            thinning: settings.thinning,
            draws_per_chain: set.chains[0].draws.len(),
            seed: settings.seed,
            chain_seeds: seeds,
            se_arms: settings.se_arms.to_string(),
            trunc_var: trunc_var_name(settings.trunc_var).to_string(),
            priors_only: settings.priors_only,
        },
        theta,
        hyperparameters,
        parameters,
        psrf: PsrfSection {
            threshold: settings.psrf_threshold,
            max_univariate,
            multivariate: report.multivariate,
            hyperparameters: hyper_psrf,
            degenerate: report.degenerate.clone(),
        },
        converged,
        warnings,
        acceptance,
    };
    let report = render_report(&summary);
    Ok(FitOutput { summary, chains: set, densities, predictive, report })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"))
}

pub fn render_report(s: &FitSummary) -> String {
    let r = &s.run;
    let mut out = String::new();
    let _ = writeln!(out, "subset {}: {} studies, {} arms", r.subset, r.n_studies, r.n_arms);
    let _ = writeln!(
        out,
        "{} chains x {} iterations, burn-in {}, thin {}, {} draws per chain, seed {}",
        r.chains, r.iterations, r.burn_in_fraction, r.thinning, r.draws_per_chain, r.seed
    );
    let _ = writeln!(
        out,
        "se arms: {}  truncated variance: {}{}",
        r.se_arms,
        r.trunc_var,
        if r.priors_only { "  (priors only)" } else { "" }
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<18} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}", "parameter", "median", "2.5%", "97.5%", "mean", "ess", "psrf");
    let row = |out: &mut String, name: &str, p: &ParamStats| {
        let _ = writeln!(
            out,
            "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.0} {:>8}",
            name,
            p.median,
            p.q025,
            p.q975,
            p.mean,
            p.ess,
            fmt_opt(p.psrf)
        );
    };
    row(&mut out, "theta", &s.theta);
    for (name, p) in &s.hyperparameters {
        row(&mut out, name, p);
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "max univariate PSRF {}  multivariate {}  threshold {}",
        fmt_opt(s.psrf.max_univariate),
        fmt_opt(s.psrf.multivariate),
        s.psrf.threshold
    );
    let _ = writeln!(out, "converged: {}", if s.converged { "yes" } else { "no" });
    for w in &s.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

/// Writes every artifact of a fit under `dir`.
pub fn write_fit(dir: &Path, fit: &FitOutput) -> CliResult<()> {
    output::write_json(&dir.join("summary.json"), &fit.summary)?;
    for (k, chain) in fit.chains.chains.iter().enumerate() {
        let path = dir.join("chains").join(format!("chain-{}.tsv", k + 1));
        output::write_chain(&path, &fit.chains.param_names, chain)?;
    }
    for (name, grid) in &fit.densities {
        output::write_columns(&dir.join("density").join(format!("{name}.tsv")), &grid.x, &grid.density)?;
    }
    let rates: Vec<f64> = fit.predictive.iter().map(|d| d.rate).collect();
    let phis: Vec<f64> = fit.predictive.iter().map(|d| d.overdispersion).collect();
    output::write_columns(&dir.join("predictive.tsv"), &rates, &phis)?;
    output::write_text(&dir.join("report.txt"), &fit.report)
}

/// Reads the input, fits, writes artifacts. With `strict`, non-convergence is
/// an error after everything has been written.
pub fn cmd_fit(config: &RunConfig) -> CliResult<FitOutput> {
    let studies = output::read_dataset(&config.input)?;
    let fit = fit_studies(&studies, &config.fit)?;
    write_fit(&config.out, &fit)?;
    if config.strict && !fit.summary.converged {
        return Err(CliError::NotConverged(fit.summary.warnings.join("; ")));
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nbsynth::evidence::parse_dataset;

    const TWO: &str = "\
study,group,arm,patients,duration_yr,rate,std_err,total,zeroes
Tashkin (2008),A,P,3006,4,0.85,0.02,10220,955
Tashkin (2008),A,L,2987,4,0.73,0.02,8722,1072
Powrie (2007),A,P,71,1,3.1,0.4471,134,
Powrie (2007),A,L,71,1,1.86,0.2966,60,
";

    fn quick(seed: u64) -> FitSettings {
        FitSettings { subset: SubsetLabel::A, iterations: 4000, thinning: 2, ..FitSettings::with_seed(seed) }
    }

    #[test]
    fn summary_has_theta_and_hypers() {
        let studies = parse_dataset(TWO.as_bytes()).unwrap();
        let fit = fit_studies(&studies, &quick(3)).unwrap();
        let s = &fit.summary;
        assert_eq!(s.run.n_studies, 2);
        assert_eq!(s.run.draws_per_chain, 1000);
        assert!(s.theta.q025 < s.theta.median && s.theta.median < s.theta.q975);
        for name in ["exp_mu_lambda", "sigma_lambda", "exp_mu_phi", "sigma_phi", "sigma_psi"] {
            assert!(s.hyperparameters.contains_key(name), "{name}");
        }
        assert_eq!(s.parameters.len(), fit.chains.param_names.len());
        assert_eq!(fit.predictive.len(), 4 * 1000);
        let names: Vec<&str> = fit.densities.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"theta") && names.contains(&"theta_prior"));
        assert!(fit.report.contains("theta"));
    }

    #[test]
    fn theta_prior_grid_integrates_near_one() {
        let x: Vec<f64> = (1..=20000).map(|i| i as f64 * 0.005).collect();
        let g = theta_prior_grid(&x, 4f64.ln());
        // The tails outside [0.005, 100] hold about 5e-4 of the mass.
        assert!((g.integral() - 1.0).abs() < 2e-3, "{}", g.integral());
    }

    #[test]
    fn empty_subset_is_rejected() {
        let studies = parse_dataset(TWO.as_bytes()).unwrap();
        let only_b = FitSettings { subset: SubsetLabel::B, ..quick(1) };
        let ambrosino = "\
study,group,arm,patients,duration_yr,rate,std_err,total,zeroes
Ambrosino (2008),C,P,106,0.4808,,,26,
Ambrosino (2008),C,L,103,0.4808,,,19,
";
        let c_only = parse_dataset(ambrosino.as_bytes()).unwrap();
        assert!(matches!(fit_studies(&c_only, &only_b), Err(CliError::Invalid(_))));
        assert!(fit_studies(&studies, &only_b).is_ok());
    }
}
