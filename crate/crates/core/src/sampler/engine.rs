//! Adaptive random-walk Metropolis over blocks of coordinates.
//!
//! Each iteration applies every move of the target once, in order. Moves are
//! either Gaussian random walks on a block of coordinates (with a covariance
//! learned during burn-in) or one-dimensional deterministic transformations
//! along a fixed direction: translating a group of coordinates together, or
//! dilating a group around a center while shifting a log-scale coordinate by
//! the same amount. Proposal scales adapt only during burn-in.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

pub type SamplerRng = ChaCha8Rng;

/// Acceptance targets for multivariate and scalar moves.
pub const TARGET_ACCEPT_BLOCK: f64 = 0.234;
pub const TARGET_ACCEPT_SCALAR: f64 = 0.44;

/// Iterations of burn-in before the empirical covariance replaces the initial
/// diagonal proposal of a block.
const COVARIANCE_WARMUP: usize = 500;
const COVARIANCE_REFRESH: usize = 100;
const LOG_SCALE_BOUNDS: (f64, f64) = (-25.0, 8.0);

#[derive(Debug, Clone, PartialEq)]
pub enum MoveKind {
    /// Joint random walk on the listed coordinates.
    Block { coords: Vec<usize> },
    /// `x[c] += eps * w` for every `(c, w)`; volume preserving.
    Translate { coords: Vec<usize>, weights: Vec<f64> },
    /// `x[c] = center + exp(s) * (x[c] - center)` for `c` in `coords` and
    /// `x[log_scale] += s`; `center` is a coordinate or the constant zero.
    Dilate { coords: Vec<usize>, center: Option<usize>, log_scale: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoveSpec {
    pub name: String,
    pub kind: MoveKind,
    /// Initial proposal standard deviation per coordinate (or step size).
    pub initial_step: f64,
}

impl MoveSpec {
    pub fn block(name: impl Into<String>, coords: Vec<usize>, initial_step: f64) -> Self {
        Self { name: name.into(), kind: MoveKind::Block { coords }, initial_step }
    }

    fn is_scalar(&self) -> bool {
        match &self.kind {
            MoveKind::Block { coords } => coords.len() == 1,
            _ => true,
        }
    }
}

/// An unnormalized log-density over `R^d` with a decomposition into moves.
pub trait Target: Sync {
    fn param_names(&self) -> Vec<String>;

    fn moves(&self) -> Vec<MoveSpec>;

    fn initial_point(&self, rng: &mut SamplerRng) -> Vec<f64>;

    fn log_density(&self, x: &[f64]) -> f64;

    /// Log-density up to terms that do not depend on any coordinate changed by
    /// move `index`. Defaults to the full density.
    fn move_log_density(&self, index: usize, x: &[f64]) -> f64 {
        let _ = index;
        self.log_density(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplerConfig {
    pub n_iterations: usize,
    pub burn_in_fraction: f64,
    pub thinning: usize,
    pub max_init_attempts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_iterations: 200_000, burn_in_fraction: 0.5, thinning: 20, max_init_attempts: 100 }
    }
}

impl SamplerConfig {
    pub fn burn_in(&self) -> usize {
        (self.burn_in_fraction * self.n_iterations as f64).floor() as usize
    }

    /// Iteration indices kept: `burn_in + j * thinning`.
    pub fn retained_iterations(&self) -> Vec<usize> {
        (self.burn_in()..self.n_iterations).step_by(self.thinning).collect()
    }

    fn validate(&self, seeds: &[u64]) -> Result<()> {
        if seeds.len() < 2 {
            return Err(Error::Config("at least two chains are required".into()));
        }
        let mut sorted = seeds.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config("chain seeds must be distinct".into()));
        }
        if self.n_iterations < 1000 {
            return Err(Error::Config(format!("need at least 1000 iterations, got {}", self.n_iterations)));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config(format!("burn-in fraction {} outside [0, 1)", self.burn_in_fraction)));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoveAcceptance {
    pub name: String,
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveAcceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Frozen proposal parameters of one move: log step scale and, for blocks,
/// the Cholesky factor of the proposal covariance (row-major).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalSnapshot {
    pub log_scale: f64,
    pub chol: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Chain {
    pub seed: u64,
    /// One row per retained iteration.
    pub draws: Vec<Vec<f64>>,
    pub retained_iterations: Vec<usize>,
    /// Acceptance counts after burn-in.
    pub acceptance: Vec<MoveAcceptance>,
    pub proposals_at_burn_in: Vec<ProposalSnapshot>,
    pub proposals_final: Vec<ProposalSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSet {
    pub param_names: Vec<String>,
    pub chains: Vec<Chain>,
    pub config: SamplerConfig,
}

impl ChainSet {
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// Per-chain draws of one parameter.
    pub fn column(&self, index: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(|row| row[index]).collect()).collect()
    }

    pub fn pooled(&self, index: usize) -> Vec<f64> {
        self.column(index).into_iter().flatten().collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.chains.iter().map(|c| c.seed).collect()
    }
}

struct Proposal {
    log_scale: f64,
    target_accept: f64,
    /// Lower-triangular factor for block moves.
    chol: Option<DMatrix<f64>>,
    // Running moments of the block coordinates during burn-in.
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl Proposal {
    fn new(spec: &MoveSpec) -> Self {
        let dim = match &spec.kind {
            MoveKind::Block { coords } => coords.len(),
            _ => 1,
        };
        let target_accept = if spec.is_scalar() { TARGET_ACCEPT_SCALAR } else { TARGET_ACCEPT_BLOCK };
        let chol = match spec.kind {
            MoveKind::Block { .. } => Some(DMatrix::identity(dim, dim)),
            _ => None,
        };
        Self {
            log_scale: spec.initial_step.ln(),
            target_accept,
            chol,
            count: 0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    fn snapshot(&self) -> ProposalSnapshot {
        ProposalSnapshot {
            log_scale: self.log_scale,
            chol: self.chol.as_ref().map(|c| c.transpose().as_slice().to_vec()).unwrap_or_default(),
        }
    }

    fn adapt_scale(&mut self, accept_prob: f64, iteration: usize) {
        let gain = (iteration as f64 + 1.0).powf(-0.6);
        self.log_scale = (self.log_scale + gain * (accept_prob - self.target_accept))
            .clamp(LOG_SCALE_BOUNDS.0, LOG_SCALE_BOUNDS.1);
    }

    fn observe(&mut self, values: &[f64], iteration: usize) {
        self.count += 1;
        let v = DVector::from_column_slice(values);
        let delta = &v - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &v - &self.mean;
        self.scatter += &delta * delta2.transpose();
        if self.count >= COVARIANCE_WARMUP && iteration.is_multiple_of(COVARIANCE_REFRESH) {
            self.refresh_covariance();
        }
    }

    fn refresh_covariance(&mut self) {
        let dim = self.mean.len();
        let mut cov = &self.scatter / (self.count as f64 - 1.0);
        let ridge = 1e-10 * (1.0 + cov.diagonal().max());
        for i in 0..dim {
            cov[(i, i)] += ridge;
        }
        if let Some(chol) = cov.clone().cholesky() {
            let factor = chol.l();
            // Re-express the current scale relative to the new covariance.
            let old_det = self.chol.as_ref().map_or(1.0, |c| c.diagonal().product());
            let new_det = factor.diagonal().product();
            if old_det > 0.0 && new_det > 0.0 {
                self.log_scale += (old_det.ln() - new_det.ln()) / dim as f64;
            }
            self.chol = Some(factor);
        }
    }
}

fn propose(
    spec: &MoveSpec,
    proposal: &Proposal,
    x: &[f64],
    rng: &mut SamplerRng,
) -> (Vec<f64>, f64) {
    let mut y = x.to_vec();
    let step = proposal.log_scale.exp();
    match &spec.kind {
        MoveKind::Block { coords } => {
            let z: Vec<f64> = coords.iter().map(|_| rng.sample(StandardNormal)).collect();
            let chol = proposal.chol.as_ref().expect("block proposal has a factor");
            for (i, &c) in coords.iter().enumerate() {
                let mut d = 0.0;
                for (j, zj) in z.iter().enumerate().take(i + 1) {
                    d += chol[(i, j)] * zj;
                }
                y[c] += step * d;
            }
            (y, 0.0)
        }
        MoveKind::Translate { coords, weights } => {
            let eps = step * rng.sample::<f64, _>(StandardNormal);
            for (&c, &w) in coords.iter().zip(weights) {
                y[c] += eps * w;
            }
            (y, 0.0)
        }
        MoveKind::Dilate { coords, center, log_scale } => {
            let s = step * rng.sample::<f64, _>(StandardNormal);
            let c0 = center.map_or(0.0, |i| x[i]);
            let factor = s.exp();
            for &c in coords {
                y[c] = c0 + factor * (x[c] - c0);
            }
            y[*log_scale] += s;
            (y, s * coords.len() as f64)
        }
    }
}

fn block_values(spec: &MoveSpec, x: &[f64]) -> Option<Vec<f64>> {
    match &spec.kind {
        MoveKind::Block { coords } => Some(coords.iter().map(|&c| x[c]).collect()),
        _ => None,
    }
}

fn run_single<T: Target>(target: &T, config: &SamplerConfig, seed: u64) -> Result<Chain> {
    let mut rng = SamplerRng::seed_from_u64(seed);
    let moves = target.moves();
    let mut x = Vec::new();
    let mut found = false;
    for _ in 0..config.max_init_attempts.max(1) {
        x = target.initial_point(&mut rng);
        if target.log_density(&x).is_finite() {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::Initialization(format!(
            "no finite log-density after {} attempts (seed {seed})",
            config.max_init_attempts
        )));
    }

    let burn_in = config.burn_in();
    let mut proposals: Vec<Proposal> = moves.iter().map(Proposal::new).collect();
    let mut acceptance: Vec<MoveAcceptance> = moves
        .iter()
        .map(|m| MoveAcceptance { name: m.name.clone(), proposed: 0, accepted: 0 })
        .collect();
    let mut proposals_at_burn_in = proposals.iter().map(Proposal::snapshot).collect();
    let mut draws = Vec::new();
    let mut retained_iterations = Vec::new();

    for iter in 0..config.n_iterations {
        if iter == burn_in {
            proposals_at_burn_in = proposals.iter().map(Proposal::snapshot).collect();
        }
        let adapting = iter < burn_in;
        for (m, spec) in moves.iter().enumerate() {
            let (y, log_jacobian) = propose(spec, &proposals[m], &x, &mut rng);
            let current = target.move_log_density(m, &x);
            let candidate = target.move_log_density(m, &y);
            let log_ratio = candidate - current + log_jacobian;
            let accept_prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
            let u: f64 = rng.random();
            let accepted = u < accept_prob;
            if accepted {
                x = y;
            }
            if adapting {
                proposals[m].adapt_scale(accept_prob, iter);
                if let Some(values) = block_values(spec, &x) {
                    proposals[m].observe(&values, iter);
                }
            } else {
                acceptance[m].proposed += 1;
                acceptance[m].accepted += accepted as u64;
            }
        }
        if iter >= burn_in && (iter - burn_in).is_multiple_of(config.thinning) {
            draws.push(x.clone());
            retained_iterations.push(iter);
        }
    }

    Ok(Chain {
        seed,
        draws,
        retained_iterations,
        acceptance,
        proposals_at_burn_in,
        proposals_final: proposals.iter().map(Proposal::snapshot).collect(),
    })
}

/// Runs one chain per seed in parallel. Results are deterministic given the
/// seeds: every chain owns a ChaCha8 stream seeded from its own seed.
pub fn run_chains<T: Target>(target: &T, config: &SamplerConfig, seeds: &[u64]) -> Result<ChainSet> {
    config.validate(seeds)?;
    let chains = seeds
        .par_iter()
        .map(|&seed| run_single(target, config, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainSet { param_names: target.param_names(), chains, config: *config })
}

/// Per-chain seeds derived from one master seed via a ChaCha8 stream.
pub fn chain_seeds(master: u64, n_chains: usize) -> Vec<u64> {
    let mut rng = SamplerRng::seed_from_u64(master);
    let mut seeds: Vec<u64> = Vec::with_capacity(n_chains);
    while seeds.len() < n_chains {
        let s: u64 = rng.random();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}
