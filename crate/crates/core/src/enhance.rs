//! Label distribution enhancement.
//!
//! Point labels become Gaussian (or binned categorical) targets whose spread
//! comes from the data: a sliding-window base variance is smoothed over a
//! graph of time steps whose edges join temporal neighbours, steps one period
//! apart, and steps whose preceding windows are near each other.
//!
//! The graph is always laid over one series' time axis. Similarity between
//! co-batched windows enters as extra edges between the time steps those
//! windows end at, rather than as a separate per-series graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::kdtree::KdTree;
use crate::linalg::{Cholesky, DenseMatrix};
use crate::{Error, Result};

/// Lower bound applied to every variance this module produces.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    /// Neighbours per window in the similarity graph; 0 disables those edges.
    pub k_neighbors: usize,
    /// Width of the Gaussian similarity kernel.
    pub kernel_sigma: f64,
    /// Largest lag searched by period detection.
    pub max_lag: usize,
    /// Sliding window of the base variance.
    pub base_window: usize,
    /// Graph regularisation strength.
    pub lambda_reg: f64,
    /// Periodic edges are only added when the autocorrelation at the
    /// detected period reaches this value.
    pub period_threshold: f64,
    /// Number of bins for categorical targets.
    pub n_bins: usize,
    /// Bin range for categorical targets; derived from the data when absent.
    pub bin_range: Option<(f64, f64)>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            kernel_sigma: 4.0,
            max_lag: 60,
            base_window: 5,
            lambda_reg: 1.0,
            period_threshold: 0.3,
            n_bins: 32,
            bin_range: None,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_sigma > 0.0) {
            return Err(Error::Config("kernel_sigma must be positive".into()));
        }
        if self.base_window < 2 {
            return Err(Error::Config("base_window must be at least 2".into()));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Config("lambda_reg must be non-negative".into()));
        }
        if self.n_bins < 2 {
            return Err(Error::Config("n_bins must be at least 2".into()));
        }
        if let Some((lo, hi)) = self.bin_range {
            if !(hi > lo) {
                return Err(Error::Config("bin_range must be increasing".into()));
            }
        }
        Ok(())
    }
}

/// Symmetric sparse similarity weights, one adjacency row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights {
    pub n: usize,
    /// `rows[i]` holds `(j, w_ij)` sorted by `j`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseWeights {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |p| self.rows[i][p].1)
    }

    /// Each undirected edge once, as `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                if i < j {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

/// Gaussian kernel on a squared distance.
pub fn similarity(sq_dist: f64, sigma: f64) -> f64 {
    Float::exp(-sq_dist / (2.0 * sigma * sigma)).max(f64::MIN_POSITIVE)
}

/// Exact k-nearest-neighbour similarity graph over flattened windows,
/// symmetrised with `max(w_ij, w_ji)`.
pub fn knn_weights(batch: &[Vec<f64>], cfg: &EnhanceConfig) -> Result<SparseWeights> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Config("similarity graph needs at least two windows".into()));
    }
    if cfg.k_neighbors >= b {
        return Err(Error::Config(format!(
            "k_neighbors {} must be smaller than the batch size {}",
            cfg.k_neighbors, b
        )));
    }
    if !(cfg.kernel_sigma > 0.0) {
        return Err(Error::Config("kernel_sigma must be positive".into()));
    }
    let len = batch[0].len();
    if batch.iter().any(|x| x.len() != len) {
        return Err(Error::Data("all windows must have the same length".into()));
    }
    let tree = KdTree::build(batch.to_vec());
    let mut dense: Vec<Vec<(usize, f64)>> = vec![Vec::new(); b];
    for (i, x) in batch.iter().enumerate() {
        for nb in tree.nearest(x, cfg.k_neighbors, Some(i)) {
            let w = similarity(nb.sq_dist, cfg.kernel_sigma);
            dense[i].push((nb.index, w));
            dense[nb.index].push((i, w));
        }
    }
    let rows = dense
        .into_iter()
        .map(|mut row| {
            row.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
            // Duplicates are the two directions of one pair; keep the larger.
            row.dedup_by_key(|e| e.0);
            row
        })
        .collect();
    Ok(SparseWeights { n: b, rows })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Centered, variance-normalised autocorrelation at `lag`.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let m = mean(series);
    let denom: f64 = series.iter().map(|x| (x - m) * (x - m)).sum();
    if denom == 0.0 || lag >= series.len() {
        return 0.0;
    }
    let num: f64 = (lag..series.len())
        .map(|t| (series[t] - m) * (series[t - lag] - m))
        .sum();
    num / denom
}

/// Dominant period and its autocorrelation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub lag: usize,
    pub acf: f64,
}

/// Lag in `[2, max_lag]` maximising the autocorrelation; ties go to the
/// smaller lag.
pub fn detect_period(series: &[f64], max_lag: usize) -> Result<Period> {
    if max_lag < 2 || series.len() <= max_lag {
        return Err(Error::Config(format!(
            "period search needs 2 <= max_lag < len, got max_lag {} and len {}",
            max_lag,
            series.len()
        )));
    }
    let m = mean(series);
    let denom: f64 = series.iter().map(|x| (x - m) * (x - m)).sum();
    if !(denom > 0.0) {
        return Err(Error::NoPeriod);
    }
    let centered: Vec<f64> = series.iter().map(|x| x - m).collect();
    let mut best = Period {
        lag: 2,
        acf: f64::NEG_INFINITY,
    };
    for lag in 2..=max_lag {
        let num: f64 = (lag..centered.len())
            .map(|t| centered[t] * centered[t - lag])
            .sum();
        let acf = num / denom;
        if acf > best.acf {
            best = Period { lag, acf };
        }
    }
    Ok(best)
}

/// Sample variance over a sliding window of `window` steps centred on each
/// step and shifted to stay inside the series, floored at [`VARIANCE_FLOOR`].
pub fn base_variance(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window < 2 {
        return Err(Error::Config("base_window must be at least 2".into()));
    }
    let n = series.len();
    let w = window.min(n);
    let half = (window - 1) / 2;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let start = t.saturating_sub(half).min(n - w);
        let seg = &series[start..start + w];
        let v = if w < 2 {
            0.0
        } else {
            let m = mean(seg);
            seg.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (w - 1) as f64
        };
        out.push(v.max(VARIANCE_FLOOR));
    }
    Ok(out)
}

/// Weighted undirected graph over `n` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    pub n: usize,
    /// `adj[i]` holds `(j, a_ij)` for every neighbour `j != i`, sorted by `j`.
    adj: Vec<Vec<(usize, f64)>>,
}

impl AdjacencyGraph {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            adj: vec![Vec::new(); n],
        }
    }

    /// Adds `w` to edge `(i, j)` in both directions. Self loops and
    /// non-positive weights are ignored.
    pub fn add_edge(&mut self, i: usize, j: usize, w: f64) {
        if i == j || !(w > 0.0) {
            return;
        }
        for (a, b) in [(i, j), (j, i)] {
            let row = &mut self.adj[a];
            match row.binary_search_by_key(&b, |&(c, _)| c) {
                Ok(p) => row[p].1 += w,
                Err(p) => row.insert(p, (b, w)),
            }
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adj[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |p| self.adj[i][p].1)
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn degree(&self) -> Vec<f64> {
        self.adj
            .iter()
            .map(|row| row.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|r| r.len()).sum::<usize>() / 2
    }

    /// Dense `L = D - A`.
    pub fn laplacian(&self) -> DenseMatrix {
        let mut l = DenseMatrix::zeros(self.n);
        for (i, row) in self.adj.iter().enumerate() {
            let mut d = 0.0;
            for &(j, w) in row {
                l.set(i, j, -w);
                d += w;
            }
            l.set(i, i, d);
        }
        l
    }

    /// `x^T L x`, summed edge-wise.
    pub fn dirichlet_energy(&self, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for (i, row) in self.adj.iter().enumerate() {
            for &(j, w) in row {
                if i < j {
                    e += w * (x[i] - x[j]) * (x[i] - x[j]);
                }
            }
        }
        e
    }
}

/// Graph over `n` time steps: temporal edges of weight 1, periodic edges of
/// weight `clamp(acf, 0, 1)` and the given cross edges.
pub fn build_adjacency(
    n: usize,
    period: Option<Period>,
    cross: &[(usize, usize, f64)],
) -> Result<AdjacencyGraph> {
    let mut g = AdjacencyGraph::new(n);
    for t in 1..n {
        g.add_edge(t - 1, t, 1.0);
    }
    if let Some(p) = period {
        if p.lag < 2 || p.lag + 1 > n {
            return Err(Error::Config(format!(
                "period {} outside [2, {}]",
                p.lag,
                n.saturating_sub(1)
            )));
        }
        let w = p.acf.clamp(0.0, 1.0);
        for t in 0..n - p.lag {
            g.add_edge(t, t + p.lag, w);
        }
    }
    for &(i, j, w) in cross {
        if i >= n || j >= n {
            return Err(Error::Config(format!("cross edge ({i}, {j}) outside {n} nodes")));
        }
        g.add_edge(i, j, w);
    }
    Ok(g)
}

/// Solves `(I + lambda L) s = v_base` and floors the result.
///
/// Constants lie in the null space of `L`, so the solve runs on the offsets
/// from `v_base[0]`; a constant input then comes back unchanged, bit for bit.
pub fn smooth_variance(v_base: &[f64], graph: &AdjacencyGraph, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    if graph.n != v_base.len() {
        return Err(Error::LengthMismatch {
            left: graph.n,
            right: v_base.len(),
        });
    }
    if lambda == 0.0 {
        return Ok(v_base.iter().map(|v| v.max(VARIANCE_FLOOR)).collect());
    }
    let mut m = graph.laplacian();
    for v in m.data.iter_mut() {
        *v *= lambda;
    }
    for i in 0..graph.n {
        m.data[i * graph.n + i] += 1.0;
    }
    let Some(&base) = v_base.first() else {
        return Ok(Vec::new());
    };
    let offsets: Vec<f64> = v_base.iter().map(|v| v - base).collect();
    let sol = Cholesky::factor(&m)?.solve(&offsets)?;
    Ok(sol.into_iter().map(|v| (base + v).max(VARIANCE_FLOOR)).collect())
}

/// Distributional target for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedTarget {
    pub mean: f64,
    pub variance: f64,
    pub categorical: Option<Vec<f64>>,
}

pub fn enhance_continuous(labels: &[f64], variances: &[f64]) -> Result<Vec<EnhancedTarget>> {
    if labels.len() != variances.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: variances.len(),
        });
    }
    labels
        .iter()
        .zip(variances)
        .map(|(&mean, &variance)| {
            if !(variance > 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "target variance must be positive, got {variance}"
                )));
            }
            Ok(EnhancedTarget {
                mean,
                variance,
                categorical: None,
            })
        })
        .collect()
}

/// Uniform bins over a closed range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

impl Bins {
    pub fn width(&self) -> f64 {
        (self.high - self.low) / self.count as f64
    }

    pub fn edge(&self, k: usize) -> f64 {
        self.low + k as f64 * self.width()
    }

    pub fn center(&self, k: usize) -> f64 {
        self.low + (k as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.center(k)).collect()
    }
}

/// Standard normal lower tail.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

/// Probability mass of `N(mean, var)` on each bin, with both tails folded
/// into the edge bins.
pub fn gaussian_bin_masses(mean: f64, var: f64, bins: &Bins) -> Vec<f64> {
    let sd = Float::sqrt(var);
    let k = bins.count;
    let mut out = Vec::with_capacity(k);
    for b in 0..k {
        let lo = if b == 0 {
            f64::NEG_INFINITY
        } else {
            (bins.edge(b) - mean) / sd
        };
        let hi = if b + 1 == k {
            f64::INFINITY
        } else {
            (bins.edge(b + 1) - mean) / sd
        };
        // Difference taken on whichever tail keeps precision.
        let m = if lo + hi > 0.0 {
            normal_cdf(-lo) - normal_cdf(-hi)
        } else {
            normal_cdf(hi) - normal_cdf(lo)
        };
        out.push(m.max(0.0));
    }
    let s: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= s;
    }
    out
}

/// Categorical targets from `N(label, variance)`. Labels outside the bin
/// range are clamped to the nearest bin centre; the number of clamped labels
/// is returned alongside.
pub fn enhance_discrete(
    labels: &[f64],
    variances: &[f64],
    bins: &Bins,
) -> Result<(Vec<EnhancedTarget>, usize)> {
    if bins.count < 2 || !(bins.high > bins.low) {
        return Err(Error::Config("bins need count >= 2 and a non-empty range".into()));
    }
    let mut targets = enhance_continuous(labels, variances)?;
    let mut clamped = 0;
    for t in targets.iter_mut() {
        let mut y = t.mean;
        if y < bins.low || y > bins.high {
            clamped += 1;
            y = y.clamp(bins.center(0), bins.center(bins.count - 1));
        }
        t.categorical = Some(gaussian_bin_masses(y, t.variance, bins));
    }
    Ok((targets, clamped))
}

/// Smoothed per-step variances for one series plus what went into them.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    pub variance: Vec<f64>,
    pub period: Option<Period>,
    pub graph_edges: usize,
}

/// Full enhancement pipeline for the label series `y`.
///
/// `windows`, when given, pairs each flattened input window with the time
/// step its forecast starts at; similar windows link those steps.
pub fn variance_profile(
    y: &[f64],
    windows: Option<(&[Vec<f64>], &[usize])>,
    cfg: &EnhanceConfig,
) -> Result<VarianceProfile> {
    cfg.validate()?;
    let v_base = base_variance(y, cfg.base_window)?;
    let max_lag = cfg.max_lag.min(y.len().saturating_sub(1));
    let period = if max_lag >= 2 {
        match detect_period(y, max_lag) {
            Ok(p) if p.acf >= cfg.period_threshold && p.lag < y.len() => Some(p),
            Ok(_) | Err(Error::NoPeriod) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut cross = Vec::new();
    if let Some((points, nodes)) = windows {
        if points.len() != nodes.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: nodes.len(),
            });
        }
        if cfg.k_neighbors > 0 && points.len() > cfg.k_neighbors {
            let w = knn_weights(points, cfg)?;
            for (i, j, wij) in w.edges() {
                cross.push((nodes[i], nodes[j], wij));
            }
        }
    }
    let graph = build_adjacency(y.len(), period, &cross)?;
    let variance = smooth_variance(&v_base, &graph, cfg.lambda_reg)?;
    Ok(VarianceProfile {
        variance,
        period,
        graph_edges: graph.edge_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(similarity(0.0, 1.3), 1.0);
        let s = 0.7;
        let d2 = 2.0 * s * s;
        assert!((similarity(d2, s) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn knn_pair() {
        let cfg = EnhanceConfig {
            k_neighbors: 1,
            kernel_sigma: 1.0,
            ..Default::default()
        };
        let w = knn_weights(&[vec![0.0, 0.0], vec![1.0, 0.0]], &cfg).unwrap();
        assert_eq!(w.edges().len(), 1);
        assert!((w.get(0, 1) - (-0.5f64).exp()).abs() < 1e-15);
        let bad = EnhanceConfig {
            k_neighbors: 2,
            ..cfg
        };
        assert!(knn_weights(&[vec![0.0], vec![1.0]], &bad).is_err());
    }

    #[test]
    fn sine_period() {
        let y: Vec<f64> = (0..120)
            .map(|t| (2.0 * core::f64::consts::PI * t as f64 / 12.0).sin())
            .collect();
        assert_eq!(detect_period(&y, 40).unwrap().lag, 12);
        assert_eq!(detect_period(&[3.0; 50], 10), Err(Error::NoPeriod));
    }

    #[test]
    fn base_variance_cases() {
        assert!(base_variance(&[4.0; 10], 3).unwrap().iter().all(|&v| v == VARIANCE_FLOOR));
        let alt: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }).collect();
        // every window of two holds {0, 2}: sample variance 2
        assert!(base_variance(&alt, 2).unwrap().iter().all(|&v| v == 2.0));
        let y = [1.0, 2.0, 4.0];
        let v = base_variance(&y, 10).unwrap();
        // global sample variance: mean 7/3, ss = 14/3, /2
        assert!(v.iter().all(|&x| (x - 7.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn adjacency_cases() {
        let g = build_adjacency(3, None, &[]).unwrap();
        assert_eq!(g.degree(), vec![1.0, 2.0, 1.0]);
        let g = build_adjacency(6, Some(Period { lag: 3, acf: 0.5 }), &[]).unwrap();
        for t in 0..3 {
            assert_eq!(g.weight(t, t + 3), 0.5);
        }
        assert_eq!(g.edge_count(), 5 + 3);
        assert!(build_adjacency(6, Some(Period { lag: 6, acf: 0.5 }), &[]).is_err());
        assert!(build_adjacency(6, Some(Period { lag: 1, acf: 0.5 }), &[]).is_err());
    }

    #[test]
    fn smoothing_identities() {
        let g = build_adjacency(5, None, &[]).unwrap();
        let v = [0.3, 1.0, 2.0, 0.5, 0.1];
        assert_eq!(smooth_variance(&v, &g, 0.0).unwrap(), v.to_vec());
        let c = [0.7; 5];
        for s in smooth_variance(&c, &g, 3.0).unwrap() {
            assert!((s - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn discrete_targets() {
        let bins = Bins {
            low: -5.0,
            high: 5.0,
            count: 10,
        };
        // centre of bin 7 is 2.5
        let (t, c) = enhance_discrete(&[2.5], &[1e-6], &bins).unwrap();
        assert_eq!(c, 0);
        let p = t[0].categorical.as_ref().unwrap();
        assert!((p[7] - 1.0).abs() < 1e-12);
        // midway between edges of a symmetric range
        let (t, _) = enhance_discrete(&[0.0], &[0.4], &bins).unwrap();
        let p = t[0].categorical.as_ref().unwrap();
        for k in 0..5 {
            assert!((p[k] - p[9 - k]).abs() < 1e-15);
        }
        let (_, c) = enhance_discrete(&[9.0, -7.0, 1.0], &[1.0; 3], &bins).unwrap();
        assert_eq!(c, 2);
    }
}
