//! Distribution-distance metrics: histogram KL against an analytic or
//! tabulated density, and 1-d Wasserstein-1 via CDF comparison.
//!
//! Densities enter through their CDF so that mixtures, quadrature tables,
//! and test constructions all share the same interface.

use crate::error::{Error, Result};

/// Number of bins used by the standard comparison window.
pub const DEFAULT_BINS: usize = 128;

/// The standard comparison window.
pub const DEFAULT_RANGE: (f64, f64) = (-8.0, 8.0);

/// Uniform bin edges over [lo, hi].
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let step = (hi - lo) / bins as f64;
    (0..=bins).map(|i| lo + step * i as f64).collect()
}

/// Binned counts with an out-of-range overflow tally.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Total number of samples presented, including overflow.
    pub total: u64,
    /// Samples outside [edges.first(), edges.last()).
    pub overflow: u64,
}

/// Bins samples; out-of-range samples land in the overflow tally.
pub fn make_histogram(samples: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::NonMonotoneEdges);
    }
    let mut counts = vec![0u64; edges.len() - 1];
    let mut overflow = 0u64;
    let lo = edges[0];
    let hi = *edges.last().unwrap();
    for &x in samples {
        if !(lo..hi).contains(&x) {
            overflow += 1;
            continue;
        }
        // rightmost edge <= x
        let k = edges.partition_point(|&e| e <= x) - 1;
        counts[k] += 1;
    }
    Ok(Histogram { edges: edges.to_vec(), counts, total: samples.len() as u64, overflow })
}

/// KL divergence (nats) of the empirical bin masses from the density's bin
/// masses: sum over bins of p*ln(p/q), with empty bins contributing zero and
/// q clamped below at 1e-12.
pub fn histogram_kl(samples: &[f64], cdf: impl Fn(f64) -> f64, edges: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let hist = make_histogram(samples, edges)?;
    let n = hist.total as f64;
    let mut kl = 0.0;
    for (k, &c) in hist.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let p = c as f64 / n;
        let q = (cdf(edges[k + 1]) - cdf(edges[k])).max(1e-12);
        kl += p * (p / q).ln();
    }
    Ok(kl)
}

/// Wasserstein-1 distance between the empirical CDF of the samples and the
/// density's CDF, by trapezoid integration of |F_hat - F| on the grid.
pub fn wasserstein1(samples: &[f64], cdf: impl Fn(f64) -> f64, grid: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::NonMonotoneEdges);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let emp = |x: f64| sorted.partition_point(|&s| s <= x) as f64 / n;
    let mut acc = 0.0;
    let mut prev = (emp(grid[0]) - cdf(grid[0])).abs();
    for w in grid.windows(2) {
        let cur = (emp(w[1]) - cdf(w[1])).abs();
        acc += 0.5 * (prev + cur) * (w[1] - w[0]);
        prev = cur;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::GaussianMixture;

    #[test]
    fn histogram_conservation() {
        let samples = [-9.0, -1.0, 0.0, 0.5, 3.0, 12.0];
        let edges = uniform_edges(-8.0, 8.0, 16);
        let h = make_histogram(&samples, &edges).unwrap();
        let binned: u64 = h.counts.iter().sum();
        assert_eq!(binned + h.overflow, samples.len() as u64);
        assert_eq!(h.overflow, 2);
    }

    #[test]
    fn histogram_all_in_one_bin() {
        let samples = vec![0.25; 1000];
        let edges = uniform_edges(0.0, 1.0, 4);
        let h = make_histogram(&samples, &edges).unwrap();
        assert_eq!(h.counts, vec![0, 1000, 0, 0]);
    }

    #[test]
    fn histogram_empty_input() {
        let edges = uniform_edges(0.0, 1.0, 4);
        let h = make_histogram(&[], &edges).unwrap();
        assert!(h.counts.iter().all(|&c| c == 0));
        assert_eq!(h.total, 0);
    }

    #[test]
    fn histogram_rejects_bad_edges() {
        assert!(make_histogram(&[0.0], &[0.0, 0.0, 1.0]).is_err());
        assert!(make_histogram(&[0.0], &[1.0, 0.0]).is_err());
        assert!(make_histogram(&[0.0], &[1.0]).is_err());
    }

    // All mass in one of two bins vs a uniform density: KL = ln 2 exactly.
    #[test]
    fn kl_two_bin_closed_form() {
        let samples = vec![0.25; 2000];
        let edges = vec![0.0, 0.5, 1.0];
        let uniform_cdf = |x: f64| x.clamp(0.0, 1.0);
        let kl = histogram_kl(&samples, uniform_cdf, &edges).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_is_zero_when_masses_match() {
        // two bins, exactly half the samples in each, uniform density
        let mut samples = vec![0.25; 500];
        samples.extend(vec![0.75; 500]);
        let edges = vec![0.0, 0.5, 1.0];
        let kl = histogram_kl(&samples, |x: f64| x.clamp(0.0, 1.0), &edges).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn kl_self_consistency_on_mixture_samples() {
        let m = GaussianMixture::single(0.0, 1.0).unwrap();
        let xs = m.sample(100_000, 3);
        let edges = uniform_edges(DEFAULT_RANGE.0, DEFAULT_RANGE.1, DEFAULT_BINS);
        let kl = histogram_kl(xs.scalars().unwrap(), |x| m.cdf1(x).unwrap(), &edges).unwrap();
        assert!((0.0..=0.01).contains(&kl), "kl={kl}");
    }

    #[test]
    fn kl_invariant_under_sample_permutation() {
        let m = GaussianMixture::single(0.0, 1.0).unwrap();
        let xs = m.sample(5000, 11);
        let mut rev: Vec<f64> = xs.scalars().unwrap().to_vec();
        rev.reverse();
        let edges = uniform_edges(-8.0, 8.0, 64);
        let a = histogram_kl(xs.scalars().unwrap(), |x| m.cdf1(x).unwrap(), &edges).unwrap();
        let b = histogram_kl(&rev, |x| m.cdf1(x).unwrap(), &edges).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn kl_errors_on_empty_samples() {
        let edges = uniform_edges(-1.0, 1.0, 4);
        assert!(matches!(
            histogram_kl(&[], |x: f64| x, &edges),
            Err(Error::EmptySamples)
        ));
    }

    #[test]
    fn wasserstein_quantile_construction() {
        // samples placed at the quantiles of N(0,1) approximate it closely
        let n = 20_000;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let p = (i as f64 + 0.5) / n as f64;
                std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * p - 1.0)
            })
            .collect();
        let m = GaussianMixture::single(0.0, 1.0).unwrap();
        let grid = uniform_edges(-8.0, 8.0, 2000);
        let w = wasserstein1(&samples, |x| m.cdf1(x).unwrap(), &grid).unwrap();
        assert!(w <= 0.01, "w1={w}");
    }

    #[test]
    fn wasserstein_point_mass_translation() {
        // point mass at 0 vs a step CDF at mu: distance |mu|
        let samples = vec![0.0; 100];
        let mu = 1.75;
        let grid = uniform_edges(-4.0, 4.0, 8000);
        let w = wasserstein1(&samples, |x: f64| if x < mu { 0.0 } else { 1.0 }, &grid).unwrap();
        assert!((w - mu).abs() <= 2e-3, "w1={w}");
    }

    #[test]
    fn wasserstein_shift_invariance() {
        let m = GaussianMixture::single(0.0, 1.0).unwrap();
        let shifted = GaussianMixture::single(3.0, 1.0).unwrap();
        let xs = m.sample(4000, 21);
        let base: Vec<f64> = xs.scalars().unwrap().to_vec();
        let moved: Vec<f64> = base.iter().map(|x| x + 3.0).collect();
        let grid = uniform_edges(-8.0, 8.0, 1000);
        let grid_moved: Vec<f64> = grid.iter().map(|x| x + 3.0).collect();
        let a = wasserstein1(&base, |x| m.cdf1(x).unwrap(), &grid).unwrap();
        let b = wasserstein1(&moved, |x| shifted.cdf1(x).unwrap(), &grid_moved).unwrap();
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }

    #[test]
    fn wasserstein_triangle_sanity() {
        let p = GaussianMixture::single(0.0, 1.0).unwrap();
        let q = GaussianMixture::single(0.5, 1.0).unwrap();
        let xs = p.sample(20_000, 31);
        let samples = xs.scalars().unwrap();
        let grid = uniform_edges(-8.0, 8.0, 2000);
        let d_sq = wasserstein1(samples, |x| q.cdf1(x).unwrap(), &grid).unwrap();
        let d_sp = wasserstein1(samples, |x| p.cdf1(x).unwrap(), &grid).unwrap();
        // density-to-density distance via the same grid
        let mut d_pq = 0.0;
        for w in grid.windows(2) {
            let f0 = (p.cdf1(w[0]).unwrap() - q.cdf1(w[0]).unwrap()).abs();
            let f1 = (p.cdf1(w[1]).unwrap() - q.cdf1(w[1]).unwrap()).abs();
            d_pq += 0.5 * (f0 + f1) * (w[1] - w[0]);
        }
        assert!(d_sq <= d_sp + d_pq + 0.02, "{d_sq} > {d_sp} + {d_pq}");
    }

    #[test]
    fn wasserstein_errors() {
        assert!(wasserstein1(&[], |x: f64| x, &[0.0, 1.0]).is_err());
        assert!(wasserstein1(&[0.0], |x: f64| x, &[1.0, 0.0]).is_err());
    }
}
