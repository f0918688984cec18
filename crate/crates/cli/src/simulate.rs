//! `simulate`: synthetic trials from the generative model, aggregated into the
//! reporting formats seen in practice, plus an optional recovery check.

use std::str::FromStr;

use nbsynth::evidence::{classify_subset, ArmRecord, StudyRecord, TreatmentClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StudentT};
use serde::Serialize;

use crate::config::FitSettings;
use crate::error::{CliError, CliResult};
use crate::fit::{fit_studies, FitOutput};

/// What a synthetic study reports for each arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// Rate with standard error.
    Se,
    /// Total events and patients without events.
    Both,
    Total,
    Zero,
}

impl FromStr for ReportFormat {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.trim() {
            "se" => Ok(ReportFormat::Se),
            "both" => Ok(ReportFormat::Both),
            "total" => Ok(ReportFormat::Total),
            "zero" => Ok(ReportFormat::Zero),
            other => Err(CliError::Usage(format!("unknown reporting format '{other}'"))),
        }
    }
}

/// Relative weights of the reporting formats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportingMix(pub Vec<(ReportFormat, u32)>);

impl Default for ReportingMix {
    /// 4 SE, 8 both, 3 total-only, 9 zero-only.
    fn default() -> Self {
        ReportingMix(vec![
            (ReportFormat::Se, 4),
            (ReportFormat::Both, 8),
            (ReportFormat::Total, 3),
            (ReportFormat::Zero, 9),
        ])
    }
}

impl FromStr for ReportingMix {
    type Err = CliError;

    /// `se:4,both:8,total:3,zero:9`; a bare format name means weight 1.
    fn from_str(s: &str) -> CliResult<Self> {
        let mut parts = Vec::new();
        for item in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, weight) = match item.split_once(':') {
                Some((n, w)) => {
                    let w = w.trim().parse().map_err(|_| CliError::Usage(format!("bad weight in '{item}'")))?;
                    (n, w)
                }
                None => (item, 1),
            };
            parts.push((name.parse()?, weight));
        }
        let mix = ReportingMix(parts);
        mix.validate()?;
        Ok(mix)
    }
}

impl ReportingMix {
    fn validate(&self) -> CliResult<()> {
        if self.0.iter().map(|(_, w)| *w as u64).sum::<u64>() == 0 {
            return Err(CliError::Usage("reporting mix has no positive weight".into()));
        }
        Ok(())
    }

    /// Formats for `n` studies by largest remainder, grouped in mix order.
    pub fn allocate(&self, n: usize) -> Vec<ReportFormat> {
        let total: f64 = self.0.iter().map(|(_, w)| *w as f64).sum();
        let exact: Vec<f64> = self.0.iter().map(|(_, w)| *w as f64 / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let short = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        self.0.iter().zip(counts).flat_map(|((f, _), c)| std::iter::repeat_n(*f, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationParams {
    pub theta: f64,
    pub n_studies: usize,
    /// Median of the study rates, events per patient-year.
    pub rate_median: f64,
    pub sigma_lambda: f64,
    /// Median of the study overdispersions.
    pub phi_median: f64,
    pub sigma_phi: f64,
    /// Scale of the Student-t arm deviations.
    pub sigma_psi: f64,
    pub patients_min: u64,
    pub patients_max: u64,
    pub duration: f64,
    pub mix: ReportingMix,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            theta: 0.75,
            n_studies: 20,
            rate_median: 1.0,
            sigma_lambda: 0.4,
            phi_median: 0.5,
            sigma_phi: 0.3,
            sigma_psi: 0.05,
            patients_min: 150,
            patients_max: 600,
            duration: 1.0,
            mix: ReportingMix::default(),
        }
    }
}

impl SimulationParams {
    pub fn validate(&self) -> CliResult<()> {
        let positive = [
            ("theta", self.theta),
            ("rate median", self.rate_median),
            ("phi median", self.phi_median),
            ("duration", self.duration),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::Usage(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("sigma lambda", self.sigma_lambda), ("sigma phi", self.sigma_phi), ("sigma psi", self.sigma_psi)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::Usage(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.n_studies == 0 {
            return Err(CliError::Usage("need at least one study".into()));
        }
        if self.patients_min == 0 || self.patients_min > self.patients_max {
            return Err(CliError::Usage("patient range must be positive and ordered".into()));
        }
        self.mix.validate()
    }
}

/// One arm's true parameters and patient-level counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticArm {
    pub rate: f64,
    pub overdispersion: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticStudy {
    pub format: ReportFormat,
    pub arms: Vec<SyntheticArm>,
    pub record: StudyRecord,
}

/// Gamma-Poisson draw with mean `mean` and overdispersion `phi`.
fn nb_draw(rng: &mut ChaCha8Rng, mean: f64, phi: f64) -> u64 {
    let intensity = if phi > 0.0 {
        Gamma::new(1.0 / phi, phi * mean).expect("positive gamma parameters").sample(rng)
    } else {
        mean
    };
    if intensity > 0.0 {
        Poisson::new(intensity).expect("positive Poisson mean").sample(rng) as u64
    } else {
        0
    }
}

fn aggregate(format: ReportFormat, counts: &[u64], duration: f64, treatment: TreatmentClass) -> ArmRecord {
    let n = counts.len() as u64;
    let total: u64 = counts.iter().sum();
    let zeroes = counts.iter().filter(|&&c| c == 0).count() as u64;
    let mut arm = ArmRecord { treatment, n_patients: n, rate_est: None, std_err: None, total: None, zeroes: None };
    match format {
        ReportFormat::Se => {
            let nf = n as f64;
            let mean = total as f64 / nf;
            let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let (rate, se) = (mean / duration, (var / nf).sqrt() / duration);
            if rate > 0.0 && se > 0.0 {
                arm.rate_est = Some(rate);
                arm.std_err = Some(se);
            } else {
                arm.total = Some(total);
                arm.zeroes = Some(zeroes);
            }
        }
        ReportFormat::Both => {
            arm.total = Some(total);
            arm.zeroes = Some(zeroes);
        }
        ReportFormat::Total => arm.total = Some(total),
        ReportFormat::Zero => arm.zeroes = Some(zeroes),
    }
    arm
}

/// Generates a dataset. Every study has a placebo and one active arm.
pub fn simulate_dataset(params: &SimulationParams, seed: u64) -> CliResult<Vec<SyntheticStudy>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_rate = Normal::new(params.rate_median.ln(), params.sigma_lambda).map_err(|e| CliError::Usage(e.to_string()))?;
    let log_phi = Normal::new(params.phi_median.ln(), params.sigma_phi).map_err(|e| CliError::Usage(e.to_string()))?;
    let t3 = StudentT::new(3.0).expect("three degrees of freedom");
    let width = params.n_studies.to_string().len();
    let mut out = Vec::with_capacity(params.n_studies);
    for (i, format) in params.mix.allocate(params.n_studies).into_iter().enumerate() {
        let lambda = log_rate.sample(&mut rng).exp();
        let phi = log_phi.sample(&mut rng).exp();
        let psi = (params.sigma_psi * t3.sample(&mut rng)).exp();
        let mut arms = Vec::with_capacity(2);
        let mut records = Vec::with_capacity(2);
        for (treatment, rate) in [(TreatmentClass::Placebo, lambda), (TreatmentClass::Active, lambda * params.theta * psi)] {
            let n = rng.random_range(params.patients_min..=params.patients_max);
            let counts: Vec<u64> = (0..n).map(|_| nb_draw(&mut rng, rate * params.duration, phi)).collect();
            records.push(aggregate(format, &counts, params.duration, treatment));
            arms.push(SyntheticArm { rate, overdispersion: phi, counts });
        }
        let mut record = StudyRecord {
            study_id: format!("Sim {:0width$}", i + 1),
            duration: params.duration,
            arms: records,
            reported_group: None,
        };
        record.reported_group = classify_subset(&record).primary();
        out.push(SyntheticStudy { format, arms, record });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recovery {
    pub theta_true: f64,
    pub theta_median: f64,
    pub theta_q025: f64,
    pub theta_q975: f64,
    pub covered: bool,
    pub abs_error: f64,
    pub converged: bool,
}

impl Recovery {
    pub fn from_fit(theta_true: f64, fit: &FitOutput) -> Self {
        let t = &fit.summary.theta;
        Recovery {
            theta_true,
            theta_median: t.median,
            theta_q025: t.q025,
            theta_q975: t.q975,
            covered: t.q025 <= theta_true && theta_true <= t.q975,
            abs_error: (t.median - theta_true).abs(),
            converged: fit.summary.converged,
        }
    }
}

/// Simulates, fits the synthetic studies and compares with the truth.
pub fn simulate_and_fit(
    params: &SimulationParams,
    seed: u64,
    settings: &FitSettings,
) -> CliResult<(Vec<SyntheticStudy>, FitOutput, Recovery)> {
    let studies = simulate_dataset(params, seed)?;
    let records: Vec<StudyRecord> = studies.iter().map(|s| s.record.clone()).collect();
    let fit = fit_studies(&records, settings)?;
    let recovery = Recovery::from_fit(params.theta, &fit);
    Ok((studies, fit, recovery))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nbsynth::evidence::{parse_dataset, serialize_dataset, SubsetLabel};

    #[test]
    fn totals_are_sums_of_individual_counts() {
        let params = SimulationParams { mix: "both:1,total:1,zero:1,se:1".parse().unwrap(), ..Default::default() };
        let studies = simulate_dataset(&params, 17).unwrap();
        assert_eq!(studies.len(), 20);
        for s in &studies {
            for (arm, rec) in s.arms.iter().zip(&s.record.arms) {
                assert_eq!(rec.n_patients, arm.counts.len() as u64);
                if let Some(t) = rec.total {
                    assert_eq!(t, arm.counts.iter().sum::<u64>());
                }
                if let Some(z) = rec.zeroes {
                    assert_eq!(z, arm.counts.iter().filter(|&&c| c == 0).count() as u64);
                }
                if let Some(r) = rec.rate_est {
                    let mean = arm.counts.iter().sum::<u64>() as f64 / arm.counts.len() as f64;
                    assert!((r - mean / params.duration).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_and_subsets() {
        let studies = simulate_dataset(&SimulationParams::default(), 5).unwrap();
        let records: Vec<StudyRecord> = studies.iter().map(|s| s.record.clone()).collect();
        let mut buf = Vec::new();
        serialize_dataset(&records, &mut buf).unwrap();
        assert_eq!(parse_dataset(buf.as_slice()).unwrap(), records);
        let c = records.iter().filter(|r| classify_subset(r).contains(SubsetLabel::C)).count();
        assert_eq!(c, records.len());
        let formats: Vec<ReportFormat> = studies.iter().map(|s| s.format).collect();
        // 20 studies at 4:8:3:9 → 3.33, 6.67, 2.5, 7.5 → 3, 7, 3, 7 after largest remainder.
        assert_eq!(formats.iter().filter(|&&f| f == ReportFormat::Se).count(), 3);
        assert_eq!(formats.iter().filter(|&&f| f == ReportFormat::Both).count(), 7);
    }

    #[test]
    fn same_seed_same_data() {
        let p = SimulationParams::default();
        assert_eq!(simulate_dataset(&p, 9).unwrap(), simulate_dataset(&p, 9).unwrap());
        assert_ne!(simulate_dataset(&p, 9).unwrap(), simulate_dataset(&p, 10).unwrap());
    }

    #[test]
    fn draws_match_nb_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mean, phi) = (1.5, 0.5);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| nb_draw(&mut rng, mean, phi) as f64).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((m - mean).abs() < 0.02, "{m}");
        assert!((v - mean * (1.0 + phi * mean)).abs() < 0.05 * mean * (1.0 + phi * mean), "{v}");
        let zeros = xs.iter().filter(|&&x| x == 0.0).count() as f64 / n as f64;
        assert!((zeros - (1.0 + phi * mean).powf(-1.0 / phi)).abs() < 0.005);
    }

    #[test]
    fn mix_parsing() {
        let mix: ReportingMix = "se,zero:3".parse().unwrap();
        assert_eq!(mix.allocate(4), vec![ReportFormat::Se, ReportFormat::Zero, ReportFormat::Zero, ReportFormat::Zero]);
        assert!("se:0".parse::<ReportingMix>().is_err());
        assert!("counts:2".parse::<ReportingMix>().is_err());
        assert_eq!(ReportingMix::default().allocate(24).len(), 24);
    }
}
