//! Posterior-predictive draws of a new study's rate and overdispersion.
//!
//! Each draw gets its own ChaCha8 stream keyed by the master seed, the bits of
//! its hyperparameter sample, the replicate number and the occurrence count of
//! that exact sample. Reordering the hyperparameter samples therefore only
//! reorders the output.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HyperSample {
    pub mu_lambda: f64,
    pub sigma_lambda: f64,
    pub mu_phi: f64,
    pub sigma_phi: f64,
}

impl HyperSample {
    fn bits(&self) -> [u64; 4] {
        [self.mu_lambda, self.sigma_lambda, self.mu_phi, self.sigma_phi].map(f64::to_bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictiveDraw {
    pub rate: f64,
    pub overdispersion: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_key(seed: u64, sample: &HyperSample, replicate: u64, occurrence: u64) -> u64 {
    let mut h = splitmix64(seed);
    for word in sample.bits().into_iter().chain([replicate, occurrence]) {
        h = splitmix64(h ^ word);
    }
    h
}

/// Draws `draws_per_sample` predictive pairs for every hyperparameter sample:
/// `log rate ~ N(mu_lambda, sigma_lambda^2)`, `log phi ~ N(mu_phi, sigma_phi^2)`.
pub fn posterior_predictive(samples: &[HyperSample], draws_per_sample: usize, seed: u64) -> Vec<PredictiveDraw> {
    let mut seen: HashMap<[u64; 4], u64> = HashMap::new();
    let mut out = Vec::with_capacity(samples.len() * draws_per_sample);
    for s in samples {
        let occurrence = seen.entry(s.bits()).or_insert(0);
        for r in 0..draws_per_sample as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, s, r, *occurrence));
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            out.push(PredictiveDraw {
                rate: (s.mu_lambda + s.sigma_lambda * z1).exp(),
                overdispersion: (s.mu_phi + s.sigma_phi * z2).exp(),
            });
        }
        *occurrence += 1;
    }
    out
}
