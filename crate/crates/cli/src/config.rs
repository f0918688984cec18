//! Run configuration for `fit`, layered as flags > config file > defaults.
//!
//! The config file is flat `key = value` text. Blank lines and lines starting
//! with `#` are ignored; keys are the long flag names without dashes.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nbsynth::evidence::SubsetLabel;
use nbsynth::hiermodel::SeArmRouting;
use nbsynth::nbcore::TruncatedVariance;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const DEFAULT_CHAINS: usize = 4;
pub const DEFAULT_ITERATIONS: usize = 200_000;
pub const DEFAULT_BURN_IN: f64 = 0.5;
pub const DEFAULT_THINNING: usize = 20;
pub const DEFAULT_PSRF_THRESHOLD: f64 = 1.01;
pub const DEFAULT_OUT: &str = "nbsynth-out";

/// Sampling and model settings shared by `fit` and `simulate --fit`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSettings {
    pub subset: SubsetLabel,
    pub chains: usize,
    pub iterations: usize,
    pub burn_in_fraction: f64,
    pub thinning: usize,
    pub seed: u64,
    pub se_arms: SeArmRouting,
    pub trunc_var: TruncatedVariance,
    pub priors_only: bool,
    pub psrf_threshold: f64,
}

impl FitSettings {
    /// Desk-scale defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            subset: SubsetLabel::C,
            chains: DEFAULT_CHAINS,
            iterations: DEFAULT_ITERATIONS,
            burn_in_fraction: DEFAULT_BURN_IN,
            thinning: DEFAULT_THINNING,
            seed,
            se_arms: SeArmRouting::Normal,
            trunc_var: TruncatedVariance::Exact,
            priors_only: false,
            psrf_threshold: DEFAULT_PSRF_THRESHOLD,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.chains < 2 {
            return Err(CliError::Usage(format!("need at least 2 chains, got {}", self.chains)));
        }
        if self.iterations < 1000 {
            return Err(CliError::Usage(format!("need at least 1000 iterations, got {}", self.iterations)));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(CliError::Usage(format!("burn-in fraction {} outside [0, 1)", self.burn_in_fraction)));
        }
        if self.thinning == 0 {
            return Err(CliError::Usage("thinning must be at least 1".into()));
        }
        let retained = (self.iterations - (self.burn_in_fraction * self.iterations as f64) as usize)
            .div_ceil(self.thinning);
        if retained < nbsynth::sampler::MIN_DRAWS_FOR_PSRF {
            return Err(CliError::Usage(format!(
                "only {retained} draws per chain would be kept; need at least {}",
                nbsynth::sampler::MIN_DRAWS_FOR_PSRF
            )));
        }
        if !(self.psrf_threshold.is_finite() && self.psrf_threshold > 1.0) {
            return Err(CliError::Usage("PSRF threshold must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub out: PathBuf,
    pub strict: bool,
    pub fit: FitSettings,
}

/// Partially specified settings from one source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOverrides {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub strict: Option<bool>,
    pub subset: Option<SubsetLabel>,
    pub chains: Option<usize>,
    pub iterations: Option<usize>,
    pub burn_in_fraction: Option<f64>,
    pub thinning: Option<usize>,
    pub seed: Option<u64>,
    pub se_arms: Option<SeArmRouting>,
    pub trunc_var: Option<TruncatedVariance>,
    pub priors_only: Option<bool>,
    pub psrf_threshold: Option<f64>,
}

pub fn parse_trunc_var(s: &str) -> CliResult<TruncatedVariance> {
    match s {
        "exact" => Ok(TruncatedVariance::Exact),
        "published" => Ok(TruncatedVariance::AsPublished),
        other => Err(CliError::Usage(format!("unknown variance form '{other}', expected exact or published"))),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config line {line}: invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> CliResult<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("config line {line}: invalid boolean '{value}' for {key}"))),
    }
}

impl RunOverrides {
    pub fn parse_file_contents(text: &str) -> CliResult<Self> {
        let mut o = RunOverrides::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(CliError::Usage(format!("config line {line}: expected key = value")));
            };
            let (key, value) = (key.trim(), value.trim());
            let usage = |e: CliError| match e {
                CliError::Usage(m) if !m.starts_with("config line") => {
                    CliError::Usage(format!("config line {line}: {m}"))
                }
                other => other,
            };
            match key {
                "input" => o.input = Some(PathBuf::from(value)),
                "out" => o.out = Some(PathBuf::from(value)),
                "strict" => o.strict = Some(parse_bool(key, value, line)?),
                "priors-only" => o.priors_only = Some(parse_bool(key, value, line)?),
                "subset" => o.subset = Some(parse_value(key, value, line)?),
                "chains" => o.chains = Some(parse_value(key, value, line)?),
                "iters" => o.iterations = Some(parse_value(key, value, line)?),
                "burnin-frac" => o.burn_in_fraction = Some(parse_value(key, value, line)?),
                "thin" => o.thinning = Some(parse_value(key, value, line)?),
                "seed" => o.seed = Some(parse_value(key, value, line)?),
                "se-arms" => o.se_arms = Some(parse_value(key, value, line)?),
                "trunc-var" => o.trunc_var = Some(parse_trunc_var(value).map_err(usage)?),
                "psrf-threshold" => o.psrf_threshold = Some(parse_value(key, value, line)?),
                other => return Err(CliError::Usage(format!("config line {line}: unknown key '{other}'"))),
            }
        }
        Ok(o)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_file_contents(&text)
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn or(self, lower: RunOverrides) -> RunOverrides {
        RunOverrides {
            input: self.input.or(lower.input),
            out: self.out.or(lower.out),
            strict: self.strict.or(lower.strict),
            subset: self.subset.or(lower.subset),
            chains: self.chains.or(lower.chains),
            iterations: self.iterations.or(lower.iterations),
            burn_in_fraction: self.burn_in_fraction.or(lower.burn_in_fraction),
            thinning: self.thinning.or(lower.thinning),
            seed: self.seed.or(lower.seed),
            se_arms: self.se_arms.or(lower.se_arms),
            trunc_var: self.trunc_var.or(lower.trunc_var),
            priors_only: self.priors_only.or(lower.priors_only),
            psrf_threshold: self.psrf_threshold.or(lower.psrf_threshold),
        }
    }

    /// Applies defaults and checks the result. Input and seed have no default.
    pub fn resolve(self) -> CliResult<RunConfig> {
        let input = self.input.ok_or_else(|| CliError::Usage("no input file given (--input or 'input' in the config file)".into()))?;
        let seed = self.seed.ok_or_else(|| CliError::Usage("no seed given (--seed or 'seed' in the config file)".into()))?;
        let d = FitSettings::with_seed(seed);
        let fit = FitSettings {
            subset: self.subset.unwrap_or(d.subset),
            chains: self.chains.unwrap_or(d.chains),
            iterations: self.iterations.unwrap_or(d.iterations),
            burn_in_fraction: self.burn_in_fraction.unwrap_or(d.burn_in_fraction),
            thinning: self.thinning.unwrap_or(d.thinning),
            seed,
            se_arms: self.se_arms.unwrap_or(d.se_arms),
            trunc_var: self.trunc_var.unwrap_or(d.trunc_var),
            priors_only: self.priors_only.unwrap_or(d.priors_only),
            psrf_threshold: self.psrf_threshold.unwrap_or(d.psrf_threshold),
        };
        fit.validate()?;
        Ok(RunConfig {
            input,
            out: self.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            strict: self.strict.unwrap_or(false),
            fit,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_fill_gaps_and_flags_win() {
        let file = RunOverrides::parse_file_contents(
            "# desk run\ninput = data/table2.csv\nsubset = B\nchains = 3\nseed = 11\n\nse-arms = counts\ntrunc-var = published\nstrict = yes\n",
        )
        .unwrap();
        let flags = RunOverrides { chains: Some(6), seed: Some(5), ..Default::default() };
        let cfg = flags.or(file).resolve().unwrap();
        assert_eq!(cfg.input, PathBuf::from("data/table2.csv"));
        assert_eq!(cfg.fit.subset, SubsetLabel::B);
        assert_eq!(cfg.fit.chains, 6);
        assert_eq!(cfg.fit.seed, 5);
        assert_eq!(cfg.fit.se_arms, SeArmRouting::Counts);
        assert_eq!(cfg.fit.trunc_var, TruncatedVariance::AsPublished);
        assert_eq!(cfg.fit.iterations, DEFAULT_ITERATIONS);
        assert_eq!(cfg.fit.thinning, DEFAULT_THINNING);
        assert!(cfg.strict);
        assert_eq!(cfg.out, PathBuf::from(DEFAULT_OUT));
    }

    #[test]
    fn bad_config_lines_name_the_line() {
        for (text, needle) in [
            ("chains = 4\nbogus = 1\n", "line 2"),
            ("seed\n", "line 1"),
            ("\n\niters = many\n", "line 3"),
            ("trunc-var = sloppy\n", "line 1"),
        ] {
            let err = RunOverrides::parse_file_contents(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
        }
    }

    #[test]
    fn seed_and_input_are_required() {
        let no_seed = RunOverrides { input: Some("x.csv".into()), ..Default::default() };
        assert!(no_seed.resolve().is_err());
        let no_input = RunOverrides { seed: Some(1), ..Default::default() };
        assert!(no_input.resolve().is_err());
    }

    #[test]
    fn settings_bounds() {
        let base = RunOverrides { input: Some("x.csv".into()), seed: Some(1), ..Default::default() };
        assert!(RunOverrides { iterations: Some(999), ..base.clone() }.resolve().is_err());
        assert!(RunOverrides { chains: Some(1), ..base.clone() }.resolve().is_err());
        assert!(RunOverrides { burn_in_fraction: Some(1.0), ..base.clone() }.resolve().is_err());
        assert!(RunOverrides { iterations: Some(2000), thinning: Some(50), ..base.clone() }.resolve().is_err());
        assert!(base.resolve().is_ok());
    }
}
