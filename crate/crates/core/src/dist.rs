//! One-dimensional Gaussian mixtures, categorical distributions and the
//! kernel distances used to compare them.
//!
//! The RBF kernel is `k(x, y) = exp(-(x - y)^2 / (2 kappa^2))`. Its
//! expectation under two Gaussians has a closed form, which makes the squared
//! MMD between two mixtures exact. The bandwidth heuristic takes `kappa` as the
//! median absolute pairwise difference itself (not its square).

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::enhance::normal_cdf;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Tolerance on probability vectors summing to one.
pub const SUM_TOL: f64 = 1e-9;

/// Bandwidth used when the median heuristic degenerates.
pub const DEFAULT_BANDWIDTH: f64 = 1.0;

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty probability vector".into()));
    }
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidDistribution("negative or NaN probability".into()));
    }
    let s: f64 = p.iter().sum();
    if Float::abs(s - 1.0) > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("probabilities sum to {s}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture1D {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl GaussianMixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if weights.len() != means.len() || means.len() != variances.len() {
            return Err(Error::InvalidDistribution(format!(
                "component counts differ: {} weights, {} means, {} variances",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        check_probs(&weights)?;
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDistribution("variances must be positive".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidDistribution("means must be finite".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        Self::new(alloc::vec![1.0], alloc::vec![mean], alloc::vec![variance])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(g, m)| g * m).sum()
    }

    /// Law of total variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(g, (mu, v))| g * (v + (mu - m) * (mu - m)))
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(g, (mu, v))| g * normal_cdf((x - mu) / Float::sqrt(*v)))
            .sum()
    }

    /// Inverse CDF by bisection.
    pub fn quantile(&self, q: f64) -> f64 {
        let sd_max = self.variances.iter().fold(0.0f64, |a, &v| a.max(v)).sqrt();
        let lo_m = self.means.iter().fold(f64::INFINITY, |a, &m| a.min(m));
        let hi_m = self.means.iter().fold(f64::NEG_INFINITY, |a, &m| a.max(m));
        let (mut lo, mut hi) = (lo_m - 40.0 * sd_max, hi_m + 40.0 * sd_max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * (1.0 + Float::abs(mid)) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Affine map `a x + b` of the random variable.
    pub fn affine(&self, a: f64, b: f64) -> Result<Self> {
        Self::new(
            self.weights.clone(),
            self.means.iter().map(|m| a * m + b).collect(),
            self.variances.iter().map(|v| a * a * v).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_probs(&probs)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `sum_ij p_i q_j E[k(X_i, Y_j)]` for Gaussian components.
fn cross_expectation(p: &GaussianMixture1D, q: &GaussianMixture1D, kappa: f64) -> f64 {
    let k2 = kappa * kappa;
    let mut acc = 0.0;
    for i in 0..p.len() {
        for j in 0..q.len() {
            let s = p.variances[i] + q.variances[j] + k2;
            let d = p.means[i] - q.means[j];
            acc += p.weights[i] * q.weights[j] * kappa / Float::sqrt(s) * Float::exp(-d * d / (2.0 * s));
        }
    }
    acc
}

/// Expected kernel value `E_{x~P, x'~Q}[k(x, x')]`.
pub fn kernel_expectation(p: &GaussianMixture1D, q: &GaussianMixture1D, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {kappa}")));
    }
    Ok(cross_expectation(p, q, kappa))
}

/// Exact squared MMD between two mixtures, clamped at zero.
pub fn mmd2_closed(p: &GaussianMixture1D, q: &GaussianMixture1D, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {kappa}")));
    }
    let pp = cross_expectation(p, p, kappa);
    let qq = cross_expectation(q, q, kappa);
    // Both orders averaged so the result is exactly symmetric in (p, q).
    let pq = 0.5 * (cross_expectation(p, q, kappa) + cross_expectation(q, p, kappa));
    Ok(((pp + qq) - 2.0 * pq).max(0.0))
}

/// Number of pairs `i < j` of the sorted `x` with `x[j] - x[i] <= d`.
fn pairs_within(x: &[f64], d: f64) -> usize {
    let mut i = 0;
    let mut count = 0;
    for j in 0..x.len() {
        while x[j] - x[i] > d {
            i += 1;
        }
        count += j - i;
    }
    count
}

/// `k`-th smallest (0-based) pairwise difference of the sorted `x`, found by
/// bisection over the bit patterns of non-negative doubles.
fn kth_pair_difference(x: &[f64], k: usize) -> f64 {
    let mut lo = 0u64;
    let mut hi = (x[x.len() - 1] - x[0]).to_bits();
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pairs_within(x, f64::from_bits(mid)) > k {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    f64::from_bits(lo)
}

/// Median of all pairwise absolute differences.
pub fn median_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Config("median heuristic needs at least two samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateBandwidth);
    }
    let mut x = samples.to_vec();
    x.sort_unstable_by(f64::total_cmp);
    let n = x.len();
    let m = n * (n - 1) / 2;
    let med = if m % 2 == 1 {
        kth_pair_difference(&x, m / 2)
    } else {
        0.5 * (kth_pair_difference(&x, m / 2 - 1) + kth_pair_difference(&x, m / 2))
    };
    if !(med > 0.0) || !med.is_finite() {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(med)
}

/// Median heuristic with a fallback for degenerate samples.
pub fn bandwidth_or_default(samples: &[f64]) -> f64 {
    median_bandwidth(samples).unwrap_or(DEFAULT_BANDWIDTH)
}

/// Random Fourier feature map for the scalar RBF kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    pub bandwidth: f64,
}

impl RffMap {
    /// Frequencies `~ N(0, 1 / bandwidth^2)`, phases `~ U[0, 2 pi)`.
    pub fn new(dim: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        let mut r = rng::stream(seed, &[0x7266_66]);
        let frequencies = (0..dim).map(|_| rng::normal(&mut r) / bandwidth).collect();
        let two_pi = 2.0 * core::f64::consts::PI;
        let phases = (0..dim).map(|_| r.random::<f64>() * two_pi).collect();
        Ok(Self {
            frequencies,
            phases,
            bandwidth,
        })
    }

    pub fn dim(&self) -> usize {
        self.frequencies.len()
    }

    /// `sqrt(2 / D) cos(W x + b)`.
    pub fn feature(&self, x: f64) -> Vec<f64> {
        let scale = Float::sqrt(2.0 / self.dim() as f64);
        self.frequencies
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| scale * Float::cos(w * x + b))
            .collect()
    }
}

/// Feature rows for every input.
pub fn rff_features(x: &[f64], map: &RffMap) -> Vec<Vec<f64>> {
    x.iter().map(|&v| map.feature(v)).collect()
}

fn mean_feature(x: &[f64], map: &RffMap) -> Vec<f64> {
    let mut acc = alloc::vec![0.0; map.dim()];
    for &v in x {
        for (a, f) in acc.iter_mut().zip(map.feature(v)) {
            *a += f;
        }
    }
    let n = x.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `|| mean phi(P) - mean phi(Q) ||^2`.
pub fn mmd2_rff(samples_p: &[f64], samples_q: &[f64], map: &RffMap) -> Result<f64> {
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(Error::Data("both sample sets must be non-empty".into()));
    }
    let mp = mean_feature(samples_p, map);
    let mq = mean_feature(samples_q, map);
    Ok(mp.iter().zip(&mq).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Smoothing added to the second argument of [`kl_categorical`].
pub const KL_EPS: f64 = 1e-10;

/// `KL(P || Q)` with `Q` smoothed by [`KL_EPS`] and renormalised.
pub fn kl_categorical(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let z = 1.0 + KL_EPS * q.len() as f64;
    let kl: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * Float::ln(pk * z / (qk + KL_EPS)))
        .sum();
    Ok(kl.max(0.0))
}

/// Draws `n` values: a component by weight, then a Gaussian.
pub fn sample_mixture(p: &GaussianMixture1D, n: usize, seed: u64) -> Vec<f64> {
    let mut r: Rng = rng::stream(seed, &[0x6d69_78]);
    let sds: Vec<f64> = p.variances.iter().map(|v| Float::sqrt(*v)).collect();
    (0..n)
        .map(|_| {
            let u: f64 = r.random();
            let mut c = 0;
            let mut acc = p.weights[0];
            while u >= acc && c + 1 < p.len() {
                c += 1;
                acc += p.weights[c];
            }
            // Zero-weight tail components are never chosen.
            while p.weights[c] == 0.0 && c > 0 {
                c -= 1;
            }
            p.means[c] + sds[c] * rng::normal(&mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identical_is_zero() {
        let p = GaussianMixture1D::new(vec![0.3, 0.7], vec![-1.0, 2.0], vec![0.5, 1.5]).unwrap();
        assert!(mmd2_closed(&p, &p, 0.8).unwrap() < 1e-12);
    }

    #[test]
    fn unit_gaussian_self_expectation() {
        let p = GaussianMixture1D::gaussian(0.0, 1.0).unwrap();
        let e = kernel_expectation(&p, &p, 1.0).unwrap();
        assert!((e - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn shifted_pair_value() {
        let p = GaussianMixture1D::gaussian(0.0, 1.0).unwrap();
        let q = GaussianMixture1D::gaussian(1.0, 1.0).unwrap();
        let want = 2.0 / 3f64.sqrt() * (1.0 - (-1.0f64 / 6.0).exp());
        let got = mmd2_closed(&p, &q, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.17727).abs() < 1e-5);
        assert!(mmd2_closed(&p, &q, 0.0).is_err());
    }

    #[test]
    fn median_matches_brute_force() {
        let mut r = rng::stream(11, &[]);
        for n in [2usize, 3, 4, 7, 50, 51] {
            let mut x: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
            if n > 3 {
                x[n / 2] = x[0];
            }
            let mut d = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    d.push((x[i] - x[j]).abs());
                }
            }
            d.sort_by(f64::total_cmp);
            let m = d.len();
            let want = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
            assert_eq!(median_bandwidth(&x).unwrap(), want);
        }
    }

    #[test]
    fn median_cases() {
        assert_eq!(median_bandwidth(&[0.0, 1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&[0.0, 1.0]).unwrap(), 1.0);
        // pairs {1, 3, 6, 2, 5, 3}: sorted 1 2 3 3 5 6 -> 3
        assert_eq!(median_bandwidth(&[0.0, 1.0, 3.0, 6.0]).unwrap(), 3.0);
        assert_eq!(median_bandwidth(&[5.0; 3]), Err(Error::DegenerateBandwidth));
        assert_eq!(bandwidth_or_default(&[5.0; 3]), DEFAULT_BANDWIDTH);
    }

    #[test]
    fn rff_constant_frequency() {
        let map = RffMap {
            frequencies: vec![0.0],
            phases: vec![0.0],
            bandwidth: 1.0,
        };
        for x in [-3.0, 0.0, 10.0] {
            assert!((map.feature(x)[0] - 2f64.sqrt()).abs() < 1e-15);
        }
        let map = RffMap::new(64, 1.3, 9).unwrap();
        for x in [-2.0, 0.1, 5.0] {
            let n2: f64 = map.feature(x).iter().map(|v| v * v).sum();
            assert!(n2 <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn rff_mmd_cases() {
        let map = RffMap::new(128, 1.0, 1).unwrap();
        let xs = [0.1, -0.4, 2.0];
        assert_eq!(mmd2_rff(&xs, &xs, &map).unwrap(), 0.0);
        let v = mmd2_rff(&[0.0], &[1.0], &map).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn kl_cases() {
        let p = CategoricalDist::new(vec![1.0, 0.0]).unwrap();
        let q = CategoricalDist::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_categorical(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(kl_categorical(&q, &q).unwrap() < 1e-9);
        let z = CategoricalDist::new(vec![0.0, 1.0]).unwrap();
        let big = kl_categorical(&p, &z).unwrap();
        assert!(big.is_finite() && big > 20.0);
        let r = CategoricalDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(kl_categorical(&p, &r).is_err());
    }

    #[test]
    fn sampling() {
        let p = GaussianMixture1D::new(vec![1.0, 0.0], vec![-5.0, 5.0], vec![1.0, 1.0]).unwrap();
        let s = sample_mixture(&p, 2000, 3);
        assert!(s.iter().all(|&x| x < 2.0));
        assert_eq!(sample_mixture(&p, 50, 11), sample_mixture(&p, 50, 11));
    }

    #[test]
    fn moments_and_quantile() {
        let p = GaussianMixture1D::new(vec![0.5, 0.5], vec![0.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(p.mean(), 1.0);
        assert_eq!(p.variance(), 2.0);
        let g = GaussianMixture1D::gaussian(0.0, 1.0).unwrap();
        assert!((g.quantile(0.95) - 1.6448536269514722).abs() < 1e-9);
        assert!((p.cdf(p.quantile(0.3)) - 0.3).abs() < 1e-10);
    }
}
