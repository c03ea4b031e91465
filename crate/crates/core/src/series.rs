//! Time-series containers, rolling windows, chronological splits, feature
//! scaling and point-forecast error metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A single series of `len` steps, each with `dim` input features and one
/// scalar target.
///
/// For a univariate series the only feature is the target itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    dim: usize,
    /// Row-major `len x dim`.
    values: Vec<f64>,
    target: Vec<f64>,
    timestamps: Option<Vec<i64>>,
}

impl TimeSeries {
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        values: Vec<f64>,
        target: Vec<f64>,
        timestamps: Option<Vec<i64>>,
    ) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::Data("series must have at least one step".into()));
        }
        if dim == 0 {
            return Err(Error::Data("feature dimension must be at least 1".into()));
        }
        if values.len() != target.len() * dim {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: target.len() * dim,
            });
        }
        if let Some(ts) = &timestamps {
            if ts.len() != target.len() {
                return Err(Error::LengthMismatch {
                    left: ts.len(),
                    right: target.len(),
                });
            }
            if ts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Data("timestamps must be strictly increasing".into()));
            }
        }
        Ok(Self {
            id: id.into(),
            dim,
            values,
            target,
            timestamps,
        })
    }

    /// Series whose single input feature is the target.
    pub fn univariate(id: impl Into<String>, y: Vec<f64>) -> Result<Self> {
        Self::new(id, 1, y.clone(), y, None)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    /// Timestamp of step `t`, or `t` itself when none were supplied.
    pub fn timestamp(&self, t: usize) -> i64 {
        match &self.timestamps {
            Some(ts) => ts[t],
            None => t as i64,
        }
    }
}

/// Supervised `(window, horizon)` pairs cut from one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub window: usize,
    pub horizon: usize,
    pub dim: usize,
    /// Each input is a row-major `window x dim` block.
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// Index of the first input step of each pair in the source series.
    pub starts: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Index of the first target step of pair `k`.
    pub fn target_start(&self, k: usize) -> usize {
        self.starts[k] + self.window
    }

    fn subset(&self, range: core::ops::Range<usize>) -> Self {
        Self {
            window: self.window,
            horizon: self.horizon,
            dim: self.dim,
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            starts: self.starts[range].to_vec(),
        }
    }

    /// Keeps only the pairs at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            window: self.window,
            horizon: self.horizon,
            dim: self.dim,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            starts: indices.iter().map(|&i| self.starts[i]).collect(),
        }
    }
}

/// How the tail of a windowed dataset is held out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Number of final series steps reserved for testing.
    pub test_len: usize,
    /// Fraction of the remaining pairs, taken from the end, used for validation.
    pub val_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_len: 28,
            val_fraction: 0.1,
        }
    }
}

/// Cuts every `(window, horizon)` pair out of `series`.
///
/// Pair `k` takes inputs `[k, k + window)` and targets `[k + window, k + window + horizon)`.
pub fn make_windows(series: &TimeSeries, window: usize, horizon: usize) -> Result<WindowedDataset> {
    if window == 0 || horizon == 0 {
        return Err(Error::Config("window and horizon must be positive".into()));
    }
    let needed = window + horizon;
    if series.len() < needed {
        return Err(Error::InsufficientLength {
            needed,
            got: series.len(),
        });
    }
    let n = series.len() - needed + 1;
    let d = series.dim();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for k in 0..n {
        inputs.push(series.values()[k * d..(k + window) * d].to_vec());
        targets.push(series.target()[k + window..k + window + horizon].to_vec());
    }
    Ok(WindowedDataset {
        window,
        horizon,
        dim: d,
        inputs,
        targets,
        starts: (0..n).collect(),
    })
}

/// Chronological train/validation/test split.
///
/// Test holds every pair whose target range touches the last `test_len`
/// steps. The pairs before it are split with the last `val_fraction` going
/// to validation.
pub fn time_split(
    ds: &WindowedDataset,
    spec: &SplitSpec,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must lie in (0, 1), got {}",
            spec.val_fraction
        )));
    }
    if spec.test_len < ds.horizon {
        return Err(Error::Config(format!(
            "test_len {} is shorter than the horizon {}",
            spec.test_len, ds.horizon
        )));
    }
    if ds.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    // Length of the source series implied by the last pair.
    let series_len = ds.starts[ds.len() - 1] + ds.window + ds.horizon;
    if spec.test_len > series_len {
        return Err(Error::Config(format!(
            "test_len {} exceeds the series length {}",
            spec.test_len, series_len
        )));
    }
    let test_begin = series_len - spec.test_len;
    let first_test = (0..ds.len())
        .find(|&k| ds.target_start(k) + ds.horizon > test_begin)
        .unwrap_or(ds.len());
    let n_rest = first_test;
    let n_val = Float::round(spec.val_fraction * n_rest as f64) as usize;
    let n_val = n_val.max(1);
    if first_test == ds.len() || n_rest <= n_val {
        return Err(Error::Config(format!(
            "split leaves an empty partition ({} pairs before the test region, {} for validation)",
            n_rest, n_val
        )));
    }
    let n_train = n_rest - n_val;
    Ok((
        ds.subset(0..n_train),
        ds.subset(n_train..n_rest),
        ds.subset(first_test..ds.len()),
    ))
}

/// Per-feature z-score parameters fitted on training inputs, plus the same
/// for the scalar target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let vals: Vec<f64> = values.collect();
    for &v in &vals {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    for &v in &vals {
        sq += (v - mean) * (v - mean);
    }
    let std = Float::sqrt(sq / n as f64);
    // Zero-spread features pass through unscaled.
    if std > 0.0 && std.is_finite() {
        (mean, std)
    } else {
        (0.0, 1.0)
    }
}

impl Scaler {
    /// Population mean and std over every training input step and target.
    pub fn fit(train: &WindowedDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("cannot fit a scaler on an empty dataset".into()));
        }
        let d = train.dim;
        let mut feature_mean = Vec::with_capacity(d);
        let mut feature_std = Vec::with_capacity(d);
        for f in 0..d {
            let (m, s) = mean_std(
                train
                    .inputs
                    .iter()
                    .flat_map(|x| x.iter().skip(f).step_by(d).copied()),
            );
            feature_mean.push(m);
            feature_std.push(s);
        }
        let (target_mean, target_std) = mean_std(train.targets.iter().flatten().copied());
        Ok(Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        })
    }

    /// Applies the transform. Applying it twice is not the identity.
    pub fn transform(&self, ds: &WindowedDataset) -> WindowedDataset {
        let d = ds.dim;
        let mut out = ds.clone();
        for x in out.inputs.iter_mut() {
            for (i, v) in x.iter_mut().enumerate() {
                let f = i % d;
                *v = (*v - self.feature_mean[f]) / self.feature_std[f];
            }
        }
        for y in out.targets.iter_mut() {
            for v in y.iter_mut() {
                *v = self.scale_target(*v);
            }
        }
        out
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn unscale_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

/// Fits a [`Scaler`] on `train` and returns the transformed copy with it.
pub fn zscore_fit_transform(train: &WindowedDataset) -> Result<(WindowedDataset, Scaler)> {
    let scaler = Scaler::fit(train)?;
    Ok((scaler.transform(train), scaler))
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Data("metrics need at least one value".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(Float::sqrt(sq / pred.len() as f64))
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| Float::abs(p - t)).sum();
    Ok(s / pred.len() as f64)
}

/// Denominator guard for [`mape`].
pub const MAPE_EPS: f64 = 1e-8;

/// Mean absolute percentage error, in percent.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| Float::abs(p - t) / Float::abs(*t).max(MAPE_EPS))
        .sum();
    Ok(100.0 * s / pred.len() as f64)
}
