//! MCMC engine, convergence diagnostics, posterior summaries and
//! posterior-predictive draws.
//!
//! Chains use ChaCha8 streams; per-chain seeds come from [`chain_seeds`], which
//! expands one master seed through its own ChaCha8 stream.

mod diagnostics;
mod engine;
mod predictive;
mod summary;

pub use diagnostics::{
    effective_sample_size, psrf, psrf_multivariate, psrf_univariate, ParamPsrf, PsrfReport, MIN_DRAWS_FOR_PSRF,
};
pub use engine::{
    chain_seeds, run_chains, Chain, ChainSet, MoveAcceptance, MoveKind, MoveSpec, ProposalSnapshot, SamplerConfig,
    SamplerRng, Target, TARGET_ACCEPT_BLOCK, TARGET_ACCEPT_SCALAR,
};
pub use predictive::{posterior_predictive, HyperSample, PredictiveDraw};
pub use summary::{quantile_sorted, silverman_bandwidth, summarize, DensityGrid, PosteriorSummary, DENSITY_GRID_POINTS};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

    struct StdNormal2;

    impl Target for StdNormal2 {
        fn param_names(&self) -> Vec<String> {
            vec!["x".into(), "y".into()]
        }
        fn moves(&self) -> Vec<MoveSpec> {
            vec![MoveSpec::block("xy", vec![0, 1], 0.5)]
        }
        fn initial_point(&self, rng: &mut SamplerRng) -> Vec<f64> {
            vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * (x[0] * x[0] + x[1] * x[1])
        }
    }

    /// Mean of unit-variance observations under a N(0, 10^2) prior.
    struct ConjugateMean {
        data: Vec<f64>,
    }

    impl ConjugateMean {
        fn posterior(&self) -> (f64, f64) {
            let precision = 1.0 / 100.0 + self.data.len() as f64;
            (self.data.iter().sum::<f64>() / precision, (1.0 / precision).sqrt())
        }
    }

    impl Target for ConjugateMean {
        fn param_names(&self) -> Vec<String> {
            vec!["mu".into()]
        }
        fn moves(&self) -> Vec<MoveSpec> {
            vec![MoveSpec::block("mu", vec![0], 1.0)]
        }
        fn initial_point(&self, rng: &mut SamplerRng) -> Vec<f64> {
            vec![rng.random_range(-5.0..5.0)]
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * x[0] * x[0] / 100.0 - 0.5 * self.data.iter().map(|y| (y - x[0]).powi(2)).sum::<f64>()
        }
    }

    struct DoubleWell;

    impl DoubleWell {
        fn log_density_at(x: f64) -> f64 {
            -2.0 * (x * x - 1.0).powi(2)
        }
    }

    impl Target for DoubleWell {
        fn param_names(&self) -> Vec<String> {
            vec!["x".into()]
        }
        fn moves(&self) -> Vec<MoveSpec> {
            vec![MoveSpec::block("x", vec![0], 1.0)]
        }
        fn initial_point(&self, _rng: &mut SamplerRng) -> Vec<f64> {
            vec![1.0]
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            Self::log_density_at(x[0])
        }
    }

    struct Nowhere;

    impl Target for Nowhere {
        fn param_names(&self) -> Vec<String> {
            vec!["x".into()]
        }
        fn moves(&self) -> Vec<MoveSpec> {
            vec![MoveSpec::block("x", vec![0], 1.0)]
        }
        fn initial_point(&self, _rng: &mut SamplerRng) -> Vec<f64> {
            vec![0.0]
        }
        fn log_density(&self, _x: &[f64]) -> f64 {
            f64::NEG_INFINITY
        }
    }

    /// Funnel-shaped target exercising translate and dilate moves:
    /// `v ~ N(0, 1.5^2)`, `x_i ~ N(m, exp(v)^2)`, `m ~ N(0, 1)`.
    struct Funnel;

    impl Target for Funnel {
        fn param_names(&self) -> Vec<String> {
            vec!["m".into(), "v".into(), "x0".into(), "x1".into(), "x2".into()]
        }
        fn moves(&self) -> Vec<MoveSpec> {
            vec![
                MoveSpec::block("mv", vec![0, 1], 0.5),
                MoveSpec::block("x", vec![2, 3, 4], 0.5),
                MoveSpec {
                    name: "shift".into(),
                    kind: MoveKind::Translate { coords: vec![0, 2, 3, 4], weights: vec![1.0; 4] },
                    initial_step: 0.5,
                },
                MoveSpec {
                    name: "scale".into(),
                    kind: MoveKind::Dilate { coords: vec![2, 3, 4], center: Some(0), log_scale: 1 },
                    initial_step: 0.5,
                },
            ]
        }
        fn initial_point(&self, rng: &mut SamplerRng) -> Vec<f64> {
            (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let (m, v) = (x[0], x[1]);
            let s = v.exp();
            -0.5 * m * m - 0.5 * (v / 1.5).powi(2)
                + x[2..].iter().map(|xi| -v - 0.5 * ((xi - m) / s).powi(2)).sum::<f64>()
        }
    }

    fn config(n: usize, burn: f64, thin: usize) -> SamplerConfig {
        SamplerConfig { n_iterations: n, burn_in_fraction: burn, thinning: thin, max_init_attempts: 10 }
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let cfg = config(5000, 0.5, 3);
        let a = run_chains(&Funnel, &cfg, &[1, 2, 3]).unwrap();
        let b = run_chains(&Funnel, &cfg, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        let c = run_chains(&Funnel, &cfg, &[1, 2, 4]).unwrap();
        assert_eq!(a.chains[0], c.chains[0]);
        assert_ne!(a.chains[2], c.chains[2]);
    }

    #[test]
    fn retained_indices_follow_thinning() {
        let cfg = config(10_001, 0.3, 7);
        let set = run_chains(&StdNormal2, &cfg, &[5, 6]).unwrap();
        let burn = cfg.burn_in();
        assert_eq!(burn, 3000);
        for chain in &set.chains {
            assert_eq!(chain.retained_iterations.len(), chain.draws.len());
            for (j, &it) in chain.retained_iterations.iter().enumerate() {
                assert_eq!(it, burn + j * 7);
            }
            assert!(*chain.retained_iterations.last().unwrap() < 10_001);
        }
    }

    #[test]
    fn adaptation_frozen_after_burn_in() {
        let set = run_chains(&Funnel, &config(20_000, 0.5, 10), &[8, 9]).unwrap();
        for chain in &set.chains {
            assert_eq!(chain.proposals_at_burn_in, chain.proposals_final);
            for acc in &chain.acceptance {
                assert_eq!(acc.proposed, 10_000);
                assert!(acc.rate() > 0.05 && acc.rate() < 0.95, "{} {}", acc.name, acc.rate());
            }
        }
    }

    #[test]
    fn bivariate_standard_normal() {
        let set = run_chains(&StdNormal2, &config(100_000, 0.5, 1), &[21, 22]).unwrap();
        assert_eq!(set.chains.iter().map(|c| c.draws.len()).sum::<usize>(), 100_000);
        let xs = set.pooled(0);
        let ys = set.pooled(1);
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        for (i, mean) in [(0, mx), (1, my)] {
            let ess = effective_sample_size(&set.column(i));
            assert!(mean.abs() < 3.0 / ess.sqrt(), "mean {mean}, ess {ess}");
        }
        let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
        let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
        let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        assert!((vx - 1.0).abs() < 0.05 && (vy - 1.0).abs() < 0.05 && cxy.abs() < 0.05, "{vx} {vy} {cxy}");
        let rate = set.chains[0].acceptance[0].rate();
        assert!((rate - TARGET_ACCEPT_BLOCK).abs() < 0.05, "{rate}");
    }

    #[test]
    fn conjugate_normal_quantiles() {
        let target = ConjugateMean { data: vec![1.2, 0.7, 2.1, 1.6, 0.9, 1.4, 1.1, 1.8] };
        let (m, s) = target.posterior();
        let set = run_chains(&target, &config(60_000, 0.5, 1), &[31, 32, 33, 34]).unwrap();
        let summary = summarize("mu", &set.column(0));
        let exact = Normal::new(m, s).unwrap();
        for (p, q) in [(0.025, summary.q025), (0.5, summary.median), (0.975, summary.q975)] {
            let truth = exact.inverse_cdf(p);
            let density = (-0.5 * ((truth - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            let mc_se = (p * (1.0 - p) / summary.ess).sqrt() / density;
            assert!((q - truth).abs() < 4.0 * mc_se, "p={p}: {q} vs {truth} (se {mc_se})");
        }
        let rate = set.chains[0].acceptance[0].rate();
        assert!((rate - TARGET_ACCEPT_SCALAR).abs() < 0.05, "{rate}");
    }

    #[test]
    fn double_well_histogram_matches_density() {
        let set = run_chains(&DoubleWell, &config(1_000_000, 0.2, 16), &[41, 42]).unwrap();
        let draws = set.pooled(0);
        let n = draws.len() as f64;
        let edges: Vec<f64> = (0..=20).map(|i| -2.0 + 0.2 * i as f64).collect();
        // Bin probabilities by Simpson's rule on the unnormalized density.
        let integrate = |a: f64, b: f64| {
            let k = 200;
            let h = (b - a) / k as f64;
            (0..=k)
                .map(|i| {
                    let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * DoubleWell::log_density_at(a + i as f64 * h).exp()
                })
                .sum::<f64>()
                * h
                / 3.0
        };
        let norm = integrate(-6.0, 6.0);
        let mut chi2 = 0.0;
        let mut expected_tail = n;
        let mut observed_tail = n;
        for w in edges.windows(2) {
            let expected = n * integrate(w[0], w[1]) / norm;
            let observed = draws.iter().filter(|&&x| x >= w[0] && x < w[1]).count() as f64;
            chi2 += (observed - expected).powi(2) / expected;
            expected_tail -= expected;
            observed_tail -= observed;
        }
        chi2 += (observed_tail - expected_tail).powi(2) / expected_tail;
        let p = 1.0 - ChiSquared::new(20.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn funnel_moves_recover_scale_marginal() {
        let set = run_chains(&Funnel, &config(80_000, 0.5, 4), &[51, 52, 53, 54]).unwrap();
        let v = summarize("v", &set.column(1));
        // Marginal of v is N(0, 1.5^2).
        assert!(v.mean.abs() < 0.15, "{}", v.mean);
        assert!((v.sd - 1.5).abs() < 0.15, "{}", v.sd);
        let report = psrf(&set, &[]).unwrap();
        assert!(report.max_univariate().unwrap() < 1.05, "{report:?}");
    }

    #[test]
    fn psrf_of_copied_chains() {
        let set = run_chains(&StdNormal2, &config(2000, 0.5, 1), &[61, 62]).unwrap();
        let mut copied = set.clone();
        copied.chains[1] = copied.chains[0].clone();
        let n = copied.chains[0].draws.len() as f64;
        let r = psrf(&copied, &["x"]).unwrap();
        assert!((r.get("x").unwrap() - ((n - 1.0) / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn invalid_configurations() {
        let ok = config(2000, 0.5, 1);
        assert!(matches!(run_chains(&StdNormal2, &ok, &[1]), Err(Error::Config(_))));
        assert!(matches!(run_chains(&StdNormal2, &ok, &[1, 1]), Err(Error::Config(_))));
        assert!(run_chains(&StdNormal2, &config(999, 0.5, 1), &[1, 2]).is_err());
        assert!(run_chains(&StdNormal2, &config(2000, 1.0, 1), &[1, 2]).is_err());
        assert!(run_chains(&StdNormal2, &config(2000, 0.5, 0), &[1, 2]).is_err());
        assert!(matches!(run_chains(&Nowhere, &ok, &[1, 2]), Err(Error::Initialization(_))));
    }

    #[test]
    fn chain_seeds_are_distinct_and_stable() {
        let s = chain_seeds(2024, 8);
        assert_eq!(s, chain_seeds(2024, 8));
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 8);
        assert_eq!(&chain_seeds(2024, 3)[..], &s[..3]);
    }
}
