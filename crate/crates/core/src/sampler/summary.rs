//! Posterior summaries: pooled quantiles, credible intervals and a Gaussian
//! kernel density estimate on a regular grid.

use serde::Serialize;

use super::diagnostics::effective_sample_size;

pub const DENSITY_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityGrid {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub name: String,
    pub n_draws: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q025: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
    pub q975: f64,
    pub ess: f64,
    /// `None` when all draws are equal.
    pub density: Option<DensityGrid>,
    pub degenerate: bool,
}

impl PosteriorSummary {
    pub fn ci50(&self) -> (f64, f64) {
        (self.q25, self.q75)
    }

    pub fn ci90(&self) -> (f64, f64) {
        (self.q05, self.q95)
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.q025, self.q975)
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarizes per-chain draws of one parameter, already on its reporting scale.
///
/// # Panics
/// If there are no draws.
pub fn summarize(name: &str, chains: &[Vec<f64>]) -> PosteriorSummary {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    assert!(!pooled.is_empty(), "no draws for {name}");
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len();
    let mean = pooled.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    let q = |p| quantile_sorted(&pooled, p);
    let degenerate = pooled[0] == pooled[n - 1];
    let density = if degenerate { None } else { Some(kde(&pooled, sd, q(0.75) - q(0.25))) };
    PosteriorSummary {
        name: name.to_string(),
        n_draws: n,
        mean,
        sd,
        median: q(0.5),
        q025: q(0.025),
        q05: q(0.05),
        q25: q(0.25),
        q75: q(0.75),
        q95: q(0.95),
        q975: q(0.975),
        ess: if degenerate { 0.0 } else { effective_sample_size(chains) },
        density,
        degenerate,
    }
}

/// Silverman's rule of thumb.
pub fn silverman_bandwidth(n: usize, sd: f64, iqr: f64) -> f64 {
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Gaussian KDE on a regular grid via linear binning, renormalized so the
/// trapezoidal integral over the grid is one.
fn kde(sorted: &[f64], sd: f64, iqr: f64) -> DensityGrid {
    let n = sorted.len();
    let mut h = silverman_bandwidth(n, sd, iqr);
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    if !(h > 0.0) {
        h = (hi - lo) / 10.0;
    }
    let a = lo - 3.0 * h;
    let b = hi + 3.0 * h;
    let g = DENSITY_GRID_POINTS;
    let dx = (b - a) / (g - 1) as f64;
    let x: Vec<f64> = (0..g).map(|i| a + i as f64 * dx).collect();

    let mut weights = vec![0.0; g];
    for &v in sorted {
        let pos = (v - a) / dx;
        let i = (pos.floor() as usize).min(g - 2);
        let frac = pos - i as f64;
        weights[i] += 1.0 - frac;
        weights[i + 1] += frac;
    }
    let kernel: Vec<f64> = (0..g).map(|k| (-0.5 * (k as f64 * dx / h).powi(2)).exp()).collect();
    let mut density = vec![0.0; g];
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (i, d) in density.iter_mut().enumerate() {
            *d += w * kernel[i.abs_diff(j)];
        }
    }
    let mut grid = DensityGrid { x, density, bandwidth: h };
    let total = grid.integral();
    for d in &mut grid.density {
        *d /= total;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_draws_are_degenerate() {
        let s = summarize("c", &[vec![2.5; 100], vec![2.5; 50]]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.ci95(), (2.5, 2.5));
        assert_eq!(s.ci50(), (2.5, 2.5));
        assert!(s.degenerate && s.density.is_none());
    }

    #[test]
    fn million_normal_draws_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = summarize("z", &[draws]);
        assert!((s.q025 + 1.959_964).abs() < 0.01, "{}", s.q025);
        assert!((s.q975 - 1.959_964).abs() < 0.01, "{}", s.q975);
        let grid = s.density.unwrap();
        // Density at the origin of a standard normal.
        let mid = grid.x.iter().position(|&x| x >= 0.0).unwrap();
        assert!((grid.density[mid] - 0.398_942).abs() < 0.01);
    }

    #[test]
    fn quantiles_match_type7() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&sorted, 0.5), 2.5);
        assert_eq!(quantile_sorted(&sorted, 0.0), 1.0);
        assert_eq!(quantile_sorted(&sorted, 1.0), 4.0);
        assert!((quantile_sorted(&sorted, 0.25) - 1.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn kde_integrates_to_one(values in prop::collection::vec(-1e3f64..1e3, 2..300)) {
            let s = summarize("v", &[values]);
            if let Some(grid) = s.density {
                prop_assert!((grid.integral() - 1.0).abs() < 1e-3);
            }
        }

        #[test]
        fn intervals_are_ordered(values in prop::collection::vec(-50f64..50.0, 1..200)) {
            let s = summarize("v", &[values]);
            prop_assert!(s.q025 <= s.q05 && s.q05 <= s.q25 && s.q25 <= s.median);
            prop_assert!(s.median <= s.q75 && s.q75 <= s.q95 && s.q95 <= s.q975);
        }

        #[test]
        fn chain_relabeling_invariant(a in prop::collection::vec(-5f64..5.0, 10..60),
                                      b in prop::collection::vec(-5f64..5.0, 10..60)) {
            let s1 = summarize("v", &[a.clone(), b.clone()]);
            let s2 = summarize("v", &[b, a]);
            prop_assert_eq!(s1.median, s2.median);
            prop_assert_eq!(s1.q025, s2.q025);
            prop_assert_eq!(s1.q975, s2.q975);
            prop_assert_eq!(s1.density, s2.density);
            prop_assert_eq!(s1.mean, s2.mean);
            prop_assert!((s1.ess - s2.ess).abs() < 1e-9 * s1.ess.max(1.0));
        }
    }
}
