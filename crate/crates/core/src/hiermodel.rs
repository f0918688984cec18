//! Hierarchical model linking study-level rates and overdispersions.
//!
//! Study `i` has a placebo rate `lambda_i` and overdispersion `phi_i`; active
//! arm `j` of study `i` has rate `lambda_i * theta * psi_ij`. On the log scale
//! `lambda_i`, `phi_i` are normal around hyper-means, `psi_ij` is Student-t
//! with scale `sigma_psi`, and `theta` has a normal prior centered at no
//! effect. Each arm contributes one likelihood term chosen from what it
//! reports.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::evidence::{StudyRecord, TreatmentClass};
use crate::nbcore::{normal_log_density, total_only_log_lik, NbParams, TruncatedVariance, ZeroCount};
use crate::sampler::{MoveKind, MoveSpec, SamplerRng, Target};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformBounds {
    pub lower: f64,
    pub upper: f64,
}

impl UniformBounds {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if self.contains(x) {
            -(self.upper - self.lower).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        rng.random_range(self.lower..self.upper)
    }

    fn clamp_inside(&self, x: f64) -> f64 {
        let margin = 1e-6 * (self.upper - self.lower);
        x.clamp(self.lower + margin, self.upper - margin)
    }
}

/// Prior bounds and scales. Bounds of the `log_sigma_*` entries apply to the
/// log of the corresponding scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriorSpec {
    pub mu_lambda: UniformBounds,
    pub log_sigma_lambda: UniformBounds,
    pub mu_phi: UniformBounds,
    pub log_sigma_phi: UniformBounds,
    pub log_sigma_psi: UniformBounds,
    pub log_theta_sd: f64,
    pub psi_df: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        let ln = f64::ln;
        Self {
            mu_lambda: UniformBounds::new(ln(1e-2), ln(1e2)),
            log_sigma_lambda: UniformBounds::new(ln(1e-3), ln(10.0)),
            mu_phi: UniformBounds::new(ln(1e-4), ln(1e4)),
            log_sigma_phi: UniformBounds::new(ln(1e-3), ln(10.0)),
            log_sigma_psi: UniformBounds::new(ln(1e-3), ln(10.0)),
            log_theta_sd: ln(4.0),
            psi_df: 3.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in self.bounds() {
            if !(b.lower.is_finite() && b.upper.is_finite() && b.lower < b.upper) {
                return Err(Error::Config(format!("prior bounds for {name} must be finite and ordered")));
            }
        }
        if !(self.log_theta_sd.is_finite() && self.log_theta_sd > 0.0) {
            return Err(Error::Config("treatment-effect prior scale must be positive".into()));
        }
        if !(self.psi_df.is_finite() && self.psi_df > 0.0) {
            return Err(Error::Config("Student-t degrees of freedom must be positive".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> [(&'static str, UniformBounds); 5] {
        [
            ("mu_lambda", self.mu_lambda),
            ("log_sigma_lambda", self.log_sigma_lambda),
            ("mu_phi", self.mu_phi),
            ("log_sigma_phi", self.log_sigma_phi),
            ("log_sigma_psi", self.log_sigma_psi),
        ]
    }

    fn log_theta_density(&self, x: f64) -> f64 {
        normal_log_density(x, 0.0, self.log_theta_sd * self.log_theta_sd)
    }

    fn psi_log_norm(&self) -> f64 {
        let nu = self.psi_df;
        ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
    }

    /// Student-t log-density with the normalizing constant passed in.
    fn log_psi_density(&self, x: f64, scale: f64, log_norm: f64) -> f64 {
        let nu = self.psi_df;
        let z = x / scale;
        log_norm - scale.ln() - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
    }
}

/// How arms reporting a rate with a standard error enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SeArmRouting {
    /// Normal likelihood for the reported rate.
    #[default]
    Normal,
    /// Use the arm's counts, deriving a total from the rate if needed.
    Counts,
}

impl fmt::Display for SeArmRouting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeArmRouting::Normal => "normal",
            SeArmRouting::Counts => "counts",
        })
    }
}

impl FromStr for SeArmRouting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(SeArmRouting::Normal),
            "counts" => Ok(SeArmRouting::Counts),
            other => Err(Error::Config(format!("unknown routing '{other}', expected normal or counts"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ArmLikelihood {
    RateNormal { rate: f64, std_err: f64 },
    Joint { total: u64, counts: ZeroCount },
    TotalOnly { total: u64 },
    ZeroOnly { counts: ZeroCount },
}

impl ArmLikelihood {
    pub fn label(&self) -> &'static str {
        match self {
            ArmLikelihood::RateNormal { .. } => "rate_se",
            ArmLikelihood::Joint { .. } => "joint",
            ArmLikelihood::TotalOnly { .. } => "total_only",
            ArmLikelihood::ZeroOnly { .. } => "zero_only",
        }
    }

    fn uses_overdispersion(&self) -> bool {
        !matches!(self, ArmLikelihood::RateNormal { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelArm {
    pub treatment: TreatmentClass,
    pub n_patients: u64,
    pub likelihood: ArmLikelihood,
    /// Position among all active arms of the model; `None` for placebo.
    pub psi_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelStudy {
    pub study_id: String,
    pub duration: f64,
    pub arms: Vec<ModelArm>,
}

fn route_arm(study: &StudyRecord, arm_index: usize, routing: SeArmRouting) -> Result<ArmLikelihood> {
    let arm = &study.arms[arm_index];
    if routing == SeArmRouting::Normal {
        if let (Some(rate), Some(std_err)) = (arm.rate_est, arm.std_err) {
            return Ok(ArmLikelihood::RateNormal { rate, std_err });
        }
    }
    let total = arm.total_or_derived(study.duration);
    match (total, arm.zeroes) {
        (Some(total), Some(zeroes)) => {
            if zeroes == arm.n_patients && total > 0 {
                return Err(Error::ImpossibleData(format!(
                    "{} arm {}: all patients event-free but total is {total}",
                    study.study_id,
                    arm_index + 1
                )));
            }
            Ok(ArmLikelihood::Joint { total, counts: ZeroCount::new(zeroes, arm.n_patients)? })
        }
        (Some(total), None) => Ok(ArmLikelihood::TotalOnly { total }),
        (None, Some(zeroes)) => Ok(ArmLikelihood::ZeroOnly { counts: ZeroCount::new(zeroes, arm.n_patients)? }),
        (None, None) => Err(Error::Config(format!(
            "{} arm {}: no rate with standard error, total, or zero count",
            study.study_id,
            arm_index + 1
        ))),
    }
}

/// Parameter values in structured form. Scales are on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelState {
    pub log_lambda: Vec<f64>,
    pub log_phi: Vec<f64>,
    /// One vector per study, one entry per active arm in study order.
    pub log_psi: Vec<Vec<f64>>,
    pub log_theta: f64,
    pub mu_lambda: f64,
    pub sigma_lambda: f64,
    pub mu_phi: f64,
    pub sigma_phi: f64,
    pub sigma_psi: f64,
}

impl ModelState {
    /// Hyperparameters in the order used by [`PriorSpec::bounds`], with scales
    /// on the log scale.
    fn hyper_coords(&self) -> [f64; 5] {
        [self.mu_lambda, self.sigma_lambda.ln(), self.mu_phi, self.sigma_phi.ln(), self.sigma_psi.ln()]
    }
}

/// Sum of all prior log-densities; `-inf` outside the support.
pub fn log_prior(state: &ModelState, priors: &PriorSpec) -> f64 {
    let hyper = state.hyper_coords();
    let mut total = 0.0;
    for ((_, bounds), x) in priors.bounds().iter().zip(hyper) {
        total += bounds.log_density(x);
    }
    if !total.is_finite() {
        return f64::NEG_INFINITY;
    }
    total += priors.log_theta_density(state.log_theta);
    let var_lambda = state.sigma_lambda * state.sigma_lambda;
    let var_phi = state.sigma_phi * state.sigma_phi;
    total += state.log_lambda.iter().map(|&x| normal_log_density(x, state.mu_lambda, var_lambda)).sum::<f64>();
    total += state.log_phi.iter().map(|&x| normal_log_density(x, state.mu_phi, var_phi)).sum::<f64>();
    let norm = priors.psi_log_norm();
    total += state.log_psi.iter().flatten().map(|&x| priors.log_psi_density(x, state.sigma_psi, norm)).sum::<f64>();
    total
}

/// One arm's likelihood term.
pub fn arm_log_lik(
    likelihood: &ArmLikelihood,
    n_patients: u64,
    rate: f64,
    overdispersion: f64,
    duration: f64,
    variance: TruncatedVariance,
) -> f64 {
    if let ArmLikelihood::RateNormal { rate: observed, std_err } = *likelihood {
        return normal_log_density(observed, rate, std_err * std_err);
    }
    let Ok(params) = NbParams::new(rate, overdispersion, duration) else {
        return f64::NEG_INFINITY;
    };
    let value = match *likelihood {
        ArmLikelihood::Joint { total, counts } => counts.joint_log_lik(total, &params, variance),
        ArmLikelihood::TotalOnly { total } => total_only_log_lik(total, n_patients, &params),
        ArmLikelihood::ZeroOnly { counts } => Ok(counts.log_lik(&params)),
        ArmLikelihood::RateNormal { .. } => unreachable!(),
    };
    match value {
        Ok(v) if !v.is_nan() => v,
        _ => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikelihoodTerm {
    pub study: usize,
    pub arm: usize,
    pub kind: &'static str,
    pub value: f64,
}

/// Terms of the log-density touched by one sampler move.
#[derive(Debug, Clone, Default)]
struct LocalTerms {
    uniform_hyper: bool,
    theta_prior: bool,
    lambda_priors: Vec<usize>,
    phi_priors: Vec<usize>,
    psi_priors: Vec<usize>,
    arms: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct HierModel {
    studies: Vec<ModelStudy>,
    priors: PriorSpec,
    routing: SeArmRouting,
    use_likelihood: bool,
    variance: TruncatedVariance,
    psi_log_norm: f64,
    /// Study index of each active arm.
    psi_study: Vec<usize>,
    moves: Vec<MoveSpec>,
    move_terms: Vec<LocalTerms>,
}

impl HierModel {
    pub fn new(studies: &[StudyRecord], priors: PriorSpec, routing: SeArmRouting) -> Result<Self> {
        priors.validate()?;
        if studies.is_empty() {
            return Err(Error::Config("the model needs at least one study".into()));
        }
        let mut model_studies = Vec::with_capacity(studies.len());
        let mut psi_study = Vec::new();
        for (i, study) in studies.iter().enumerate() {
            study.validate()?;
            let mut arms = Vec::with_capacity(study.arms.len());
            for (a, arm) in study.arms.iter().enumerate() {
                let likelihood = route_arm(study, a, routing)?;
                let psi_index = match arm.treatment {
                    TreatmentClass::Placebo => None,
                    TreatmentClass::Active => {
                        psi_study.push(i);
                        Some(psi_study.len() - 1)
                    }
                };
                arms.push(ModelArm { treatment: arm.treatment, n_patients: arm.n_patients, likelihood, psi_index });
            }
            model_studies.push(ModelStudy { study_id: study.study_id.clone(), duration: study.duration, arms });
        }
        let mut model = Self {
            studies: model_studies,
            priors,
            routing,
            use_likelihood: true,
            variance: TruncatedVariance::Exact,
            psi_log_norm: priors.psi_log_norm(),
            psi_study,
            moves: Vec::new(),
            move_terms: Vec::new(),
        };
        model.build_moves();
        Ok(model)
    }

    /// The same model with every likelihood term switched off.
    pub fn priors_only(mut self) -> Self {
        self.use_likelihood = false;
        self
    }

    /// The same model using `form` for the conditional variance of totals.
    pub fn with_truncated_variance(mut self, form: TruncatedVariance) -> Self {
        self.variance = form;
        self
    }

    pub fn truncated_variance(&self) -> TruncatedVariance {
        self.variance
    }

    pub fn studies(&self) -> &[ModelStudy] {
        &self.studies
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn routing(&self) -> SeArmRouting {
        self.routing
    }

    pub fn uses_likelihood(&self) -> bool {
        self.use_likelihood
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn n_active_arms(&self) -> usize {
        self.psi_study.len()
    }

    pub fn n_arms(&self) -> usize {
        self.studies.iter().map(|s| s.arms.len()).sum()
    }

    pub fn dim(&self) -> usize {
        2 * self.n_studies() + self.n_active_arms() + 6
    }

    pub fn idx_log_lambda(&self, i: usize) -> usize {
        i
    }

    pub fn idx_log_phi(&self, i: usize) -> usize {
        self.n_studies() + i
    }

    pub fn idx_log_psi(&self, j: usize) -> usize {
        2 * self.n_studies() + j
    }

    pub fn idx_log_theta(&self) -> usize {
        2 * self.n_studies() + self.n_active_arms()
    }

    /// Index of the first hyperparameter; the five follow in the order of
    /// [`PriorSpec::bounds`].
    pub fn idx_hyper(&self) -> usize {
        self.idx_log_theta() + 1
    }

    pub fn state_from_vec(&self, x: &[f64]) -> ModelState {
        let k = self.n_studies();
        let h = self.idx_hyper();
        let mut log_psi: Vec<Vec<f64>> = vec![Vec::new(); k];
        for (j, &i) in self.psi_study.iter().enumerate() {
            log_psi[i].push(x[self.idx_log_psi(j)]);
        }
        ModelState {
            log_lambda: x[..k].to_vec(),
            log_phi: x[k..2 * k].to_vec(),
            log_psi,
            log_theta: x[self.idx_log_theta()],
            mu_lambda: x[h],
            sigma_lambda: x[h + 1].exp(),
            mu_phi: x[h + 2],
            sigma_phi: x[h + 3].exp(),
            sigma_psi: x[h + 4].exp(),
        }
    }

    pub fn state_to_vec(&self, state: &ModelState) -> Result<Vec<f64>> {
        let k = self.n_studies();
        if state.log_lambda.len() != k || state.log_phi.len() != k || state.log_psi.len() != k {
            return Err(Error::Config(format!("state does not have {k} studies")));
        }
        let mut x = Vec::with_capacity(self.dim());
        x.extend(&state.log_lambda);
        x.extend(&state.log_phi);
        for (i, study) in self.studies.iter().enumerate() {
            let active = study.arms.iter().filter(|a| a.psi_index.is_some()).count();
            if state.log_psi[i].len() != active {
                return Err(Error::Config(format!("study {} expects {active} active-arm effects", study.study_id)));
            }
            x.extend(&state.log_psi[i]);
        }
        x.push(state.log_theta);
        x.extend(state.hyper_coords());
        Ok(x)
    }

    /// `lambda_i` for the placebo arm, `lambda_i * theta * psi_ij` otherwise.
    pub fn arm_rate(&self, state: &ModelState, study: usize, arm: usize) -> Result<f64> {
        let s = self
            .studies
            .get(study)
            .ok_or_else(|| Error::Config(format!("study index {study} out of range")))?;
        let a = s.arms.get(arm).ok_or_else(|| Error::Config(format!("arm index {arm} out of range")))?;
        let log_lambda = state.log_lambda[study];
        Ok(match a.psi_index {
            None => log_lambda.exp(),
            Some(_) => {
                let ordinal = s.arms[..arm].iter().filter(|x| x.psi_index.is_some()).count();
                (log_lambda + state.log_theta + state.log_psi[study][ordinal]).exp()
            }
        })
    }

    fn arm_term(&self, x: &[f64], study: usize, arm: usize) -> f64 {
        let s = &self.studies[study];
        let a = &s.arms[arm];
        let mut log_rate = x[self.idx_log_lambda(study)];
        if let Some(j) = a.psi_index {
            log_rate += x[self.idx_log_theta()] + x[self.idx_log_psi(j)];
        }
        arm_log_lik(&a.likelihood, a.n_patients, log_rate.exp(), x[self.idx_log_phi(study)].exp(), s.duration, self.variance)
    }

    /// Every arm's likelihood term; always one per arm.
    pub fn likelihood_terms(&self, state: &ModelState) -> Result<Vec<LikelihoodTerm>> {
        let x = self.state_to_vec(state)?;
        let mut terms = Vec::with_capacity(self.n_arms());
        for (i, s) in self.studies.iter().enumerate() {
            for (a, arm) in s.arms.iter().enumerate() {
                terms.push(LikelihoodTerm { study: i, arm: a, kind: arm.likelihood.label(), value: self.arm_term(&x, i, a) });
            }
        }
        Ok(terms)
    }

    pub fn log_likelihood(&self, state: &ModelState) -> Result<f64> {
        let x = self.state_to_vec(state)?;
        Ok(self.log_likelihood_vec(&x))
    }

    pub fn log_posterior(&self, state: &ModelState) -> Result<f64> {
        let x = self.state_to_vec(state)?;
        Ok(self.log_density(&x))
    }

    pub fn log_prior(&self, state: &ModelState) -> f64 {
        log_prior(state, &self.priors)
    }

    fn log_likelihood_vec(&self, x: &[f64]) -> f64 {
        if !self.use_likelihood {
            return 0.0;
        }
        let mut total = 0.0;
        for (i, s) in self.studies.iter().enumerate() {
            for a in 0..s.arms.len() {
                total += self.arm_term(x, i, a);
                if total == f64::NEG_INFINITY {
                    return total;
                }
            }
        }
        total
    }

    fn local_density(&self, terms: &LocalTerms, x: &[f64]) -> f64 {
        let h = self.idx_hyper();
        let p = &self.priors;
        let mut total = 0.0;
        if terms.uniform_hyper {
            for (k, (_, bounds)) in p.bounds().iter().enumerate() {
                total += bounds.log_density(x[h + k]);
            }
            if !total.is_finite() {
                return f64::NEG_INFINITY;
            }
        }
        if terms.theta_prior {
            total += p.log_theta_density(x[self.idx_log_theta()]);
        }
        if !terms.lambda_priors.is_empty() {
            let var = (2.0 * x[h + 1]).exp();
            for &i in &terms.lambda_priors {
                total += normal_log_density(x[self.idx_log_lambda(i)], x[h], var);
            }
        }
        if !terms.phi_priors.is_empty() {
            let var = (2.0 * x[h + 3]).exp();
            for &i in &terms.phi_priors {
                total += normal_log_density(x[self.idx_log_phi(i)], x[h + 2], var);
            }
        }
        if !terms.psi_priors.is_empty() {
            let scale = x[h + 4].exp();
            for &j in &terms.psi_priors {
                total += p.log_psi_density(x[self.idx_log_psi(j)], scale, self.psi_log_norm);
            }
        }
        if self.use_likelihood {
            for &(i, a) in &terms.arms {
                total += self.arm_term(x, i, a);
                if total == f64::NEG_INFINITY {
                    return total;
                }
            }
        }
        total
    }

    fn build_moves(&mut self) {
        let k = self.n_studies();
        let n_psi = self.n_active_arms();
        let h = self.idx_hyper();
        let all_studies: Vec<usize> = (0..k).collect();
        let all_psi: Vec<usize> = (0..n_psi).collect();
        let all_arms: Vec<(usize, usize)> = self
            .studies
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.arms.len()).map(move |a| (i, a)))
            .collect();
        let phi_arms: Vec<(usize, usize)> = all_arms
            .iter()
            .copied()
            .filter(|&(i, a)| self.studies[i].arms[a].likelihood.uses_overdispersion())
            .collect();
        let active_arms: Vec<(usize, usize)> =
            all_arms.iter().copied().filter(|&(i, a)| self.studies[i].arms[a].psi_index.is_some()).collect();

        let mut moves = Vec::new();
        let mut terms = Vec::new();
        for i in 0..k {
            moves.push(MoveSpec::block(
                format!("study[{}]", self.studies[i].study_id),
                vec![self.idx_log_lambda(i), self.idx_log_phi(i)],
                0.3,
            ));
            terms.push(LocalTerms {
                lambda_priors: vec![i],
                phi_priors: vec![i],
                arms: (0..self.studies[i].arms.len()).map(|a| (i, a)).collect(),
                ..Default::default()
            });
        }
        for &(i, a) in &active_arms {
            let j = self.studies[i].arms[a].psi_index.unwrap();
            moves.push(MoveSpec::block(format!("psi[{}#{}]", self.studies[i].study_id, a + 1), vec![self.idx_log_psi(j)], 0.2));
            terms.push(LocalTerms { psi_priors: vec![j], arms: vec![(i, a)], ..Default::default() });
        }
        moves.push(MoveSpec::block("log_theta", vec![self.idx_log_theta()], 0.1));
        terms.push(LocalTerms { theta_prior: true, arms: active_arms.clone(), ..Default::default() });
        moves.push(MoveSpec::block("hyper_lambda", vec![h, h + 1], 0.3));
        terms.push(LocalTerms { uniform_hyper: true, lambda_priors: all_studies.clone(), ..Default::default() });
        moves.push(MoveSpec::block("hyper_phi", vec![h + 2, h + 3], 0.3));
        terms.push(LocalTerms { uniform_hyper: true, phi_priors: all_studies.clone(), ..Default::default() });
        moves.push(MoveSpec::block("hyper_psi", vec![h + 4], 0.3));
        terms.push(LocalTerms { uniform_hyper: true, psi_priors: all_psi.clone(), ..Default::default() });

        // Moves along the hierarchical directions: shift a group together with
        // its mean, or rescale it around its mean together with its scale.
        let lambda_coords: Vec<usize> = (0..k).map(|i| self.idx_log_lambda(i)).collect();
        let phi_coords: Vec<usize> = (0..k).map(|i| self.idx_log_phi(i)).collect();
        let psi_coords: Vec<usize> = (0..n_psi).map(|j| self.idx_log_psi(j)).collect();
        let with_mean = |mean: usize, coords: &[usize]| {
            let mut c = vec![mean];
            c.extend_from_slice(coords);
            c
        };
        moves.push(MoveSpec {
            name: "shift_lambda".into(),
            kind: MoveKind::Translate { coords: with_mean(h, &lambda_coords), weights: vec![1.0; k + 1] },
            initial_step: 0.1,
        });
        terms.push(LocalTerms { uniform_hyper: true, lambda_priors: all_studies.clone(), arms: all_arms.clone(), ..Default::default() });
        moves.push(MoveSpec {
            name: "shift_phi".into(),
            kind: MoveKind::Translate { coords: with_mean(h + 2, &phi_coords), weights: vec![1.0; k + 1] },
            initial_step: 0.3,
        });
        terms.push(LocalTerms { uniform_hyper: true, phi_priors: all_studies.clone(), arms: phi_arms.clone(), ..Default::default() });
        moves.push(MoveSpec {
            name: "scale_lambda".into(),
            kind: MoveKind::Dilate { coords: lambda_coords, center: Some(h), log_scale: h + 1 },
            initial_step: 0.1,
        });
        terms.push(LocalTerms { uniform_hyper: true, lambda_priors: all_studies.clone(), arms: all_arms, ..Default::default() });
        moves.push(MoveSpec {
            name: "scale_phi".into(),
            kind: MoveKind::Dilate { coords: phi_coords, center: Some(h + 2), log_scale: h + 3 },
            initial_step: 0.3,
        });
        terms.push(LocalTerms { uniform_hyper: true, phi_priors: all_studies, arms: phi_arms, ..Default::default() });
        if n_psi > 0 {
            moves.push(MoveSpec {
                name: "scale_psi".into(),
                kind: MoveKind::Dilate { coords: psi_coords.clone(), center: None, log_scale: h + 4 },
                initial_step: 0.3,
            });
            terms.push(LocalTerms { uniform_hyper: true, psi_priors: all_psi.clone(), arms: active_arms, ..Default::default() });
            // Trade the common effect against the arm effects; arm rates are unchanged.
            let mut weights = vec![1.0];
            weights.extend(std::iter::repeat_n(-1.0, n_psi));
            moves.push(MoveSpec {
                name: "shift_theta_psi".into(),
                kind: MoveKind::Translate { coords: with_mean(self.idx_log_theta(), &psi_coords), weights },
                initial_step: 0.1,
            });
            terms.push(LocalTerms { theta_prior: true, psi_priors: all_psi, ..Default::default() });
        }
        self.moves = moves;
        self.move_terms = terms;
    }

    /// Crude placebo rate of a study from whatever its placebo arm reports.
    fn crude_rate(study: &ModelStudy) -> f64 {
        let placebo = study.arms.iter().find(|a| a.psi_index.is_none()).expect("study has a placebo arm");
        let n = placebo.n_patients as f64;
        let rate = match placebo.likelihood {
            ArmLikelihood::RateNormal { rate, .. } => rate,
            ArmLikelihood::Joint { total, .. } | ArmLikelihood::TotalOnly { total } => total as f64 / (n * study.duration),
            ArmLikelihood::ZeroOnly { counts } => {
                let p0 = (counts.zeroes() as f64 / n).clamp(0.5 / n, 1.0 - 0.5 / n);
                -p0.ln() / study.duration
            }
        };
        rate.max(0.5 / (n * study.duration))
    }

    /// Data-driven starting state: crude study rates, `phi = 0.5`, no treatment
    /// or arm effects, hyper-means at the study-level averages and hyper-scales
    /// of 0.5.
    pub fn default_state(&self) -> ModelState {
        let p = &self.priors;
        let log_lambda: Vec<f64> =
            self.studies.iter().map(|s| p.mu_lambda.clamp_inside(Self::crude_rate(s).ln())).collect();
        let mu_lambda = log_lambda.iter().sum::<f64>() / log_lambda.len() as f64;
        let log_phi = vec![0.5f64.ln(); self.n_studies()];
        let log_psi = self
            .studies
            .iter()
            .map(|s| vec![0.0; s.arms.iter().filter(|a| a.psi_index.is_some()).count()])
            .collect();
        ModelState {
            log_lambda,
            log_phi,
            log_psi,
            log_theta: 0.0,
            mu_lambda,
            sigma_lambda: 0.5,
            mu_phi: 0.5f64.ln(),
            sigma_phi: 0.5,
            sigma_psi: 0.5,
        }
    }

    /// The default state with independent normal jitter on every coordinate,
    /// kept inside the prior support.
    pub fn jittered_point(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut x = self.state_to_vec(&self.default_state()).expect("default state matches the model");
        let h = self.idx_hyper();
        let jitter = |rng: &mut _, sd: f64| Normal::new(0.0, sd).expect("positive sd").sample(rng);
        for (c, value) in x.iter_mut().enumerate() {
            let sd = if c < self.n_studies() {
                0.3
            } else if c < 2 * self.n_studies() {
                0.5
            } else if c < h {
                0.1
            } else {
                0.3
            };
            *value += jitter(rng, sd);
        }
        for (k, (_, bounds)) in self.priors.bounds().iter().enumerate() {
            x[h + k] = bounds.clamp_inside(x[h + k]);
        }
        x
    }

    /// One draw from the prior, returned in flat form.
    pub fn sample_prior(&self, rng: &mut impl Rng) -> Vec<f64> {
        let p = &self.priors;
        let h = self.idx_hyper();
        let mut x = vec![0.0; self.dim()];
        for (k, (_, bounds)) in p.bounds().iter().enumerate() {
            x[h + k] = bounds.sample(rng);
        }
        x[self.idx_log_theta()] = Normal::new(0.0, p.log_theta_sd).expect("positive sd").sample(rng);
        let lambda = Normal::new(x[h], x[h + 1].exp()).expect("positive sd");
        let phi = Normal::new(x[h + 2], x[h + 3].exp()).expect("positive sd");
        let psi = StudentT::new(p.psi_df).expect("positive df");
        for i in 0..self.n_studies() {
            x[self.idx_log_lambda(i)] = lambda.sample(rng);
            x[self.idx_log_phi(i)] = phi.sample(rng);
        }
        for j in 0..self.n_active_arms() {
            x[self.idx_log_psi(j)] = x[h + 4].exp() * psi.sample(rng);
        }
        x
    }
}

impl Target for HierModel {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        names.extend(self.studies.iter().map(|s| format!("log_lambda[{}]", s.study_id)));
        names.extend(self.studies.iter().map(|s| format!("log_phi[{}]", s.study_id)));
        for s in &self.studies {
            for (a, arm) in s.arms.iter().enumerate() {
                if arm.psi_index.is_some() {
                    names.push(format!("log_psi[{}#{}]", s.study_id, a + 1));
                }
            }
        }
        names.push("log_theta".into());
        names.extend(self.priors.bounds().iter().map(|(n, _)| n.to_string()));
        names
    }

    fn moves(&self) -> Vec<MoveSpec> {
        self.moves.clone()
    }

    fn initial_point(&self, rng: &mut SamplerRng) -> Vec<f64> {
        self.jittered_point(rng)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let prior = log_prior(&self.state_from_vec(x), &self.priors);
        if prior == f64::NEG_INFINITY {
            return prior;
        }
        prior + self.log_likelihood_vec(x)
    }

    fn move_log_density(&self, index: usize, x: &[f64]) -> f64 {
        self.local_density(&self.move_terms[index], x)
    }
}
