//! Training loop, checkpoints, evaluation and decomposition export.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dist::GaussianMixture1D;
use crate::enhance::{self, Bins, EnhanceConfig};
use crate::moe::{
    gate_noise, predict_point, BatchTargets, ExpertConfig, LossOutput, LossParts,
    LossWeights, MoeModel, OutputMode, Predictive,
};
use crate::nn::{split_steps, BiLstm, Bound, Mlp, ParamStore};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::pattern::{PatternConfig, PatternModel, RegWeights};
use crate::rng::{self, Rng};
use crate::series::{self, make_windows, time_split, Scaler, SplitSpec, TimeSeries, WindowedDataset};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Rows per forward pass at inference time.
const INFER_CHUNK: usize = 256;

const INIT_LABEL: u64 = 0x696e_6974;
const SHUFFLE_LABEL: u64 = 0x7368_7566;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MultiExpert,
    PatternAware,
    /// Single LSTM trained on squared error; the comparison baseline.
    PointLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub smooth: f64,
    pub persist: f64,
    pub period: f64,
    pub sparse: f64,
    pub local: f64,
    pub hetero: f64,
    /// Seasonal period; detected from the training labels when absent.
    pub period_len: Option<usize>,
}

impl Default for RegConfig {
    fn default() -> Self {
        let w = RegWeights::default();
        Self {
            smooth: w.smooth,
            persist: w.persist,
            period: w.period,
            sparse: w.sparse,
            local: w.local,
            hetero: w.hetero,
            period_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub mode: ModeKind,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub window: usize,
    pub horizon: usize,
    pub n_experts: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub head_hidden: usize,
    pub gate_hidden: usize,
    pub temperature: f64,
    pub noise_std: f64,
    /// Sub-experts per component of the pattern model.
    pub pattern_sub_experts: usize,
    pub pattern_hidden: usize,
    pub center_seasonal: bool,
    pub loss: LossWeights,
    pub regs: RegConfig,
    /// Hidden size of the point baseline; matched to the multi-expert
    /// parameter count when absent.
    pub baseline_hidden: Option<usize>,
    pub enhance: EnhanceConfig,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let e = ExpertConfig::default();
        let p = PatternConfig::default();
        Self {
            model: ModelKind::MultiExpert,
            mode: ModeKind::Continuous,
            lr: 1e-3,
            max_epochs: 100,
            patience: 20,
            batch_size: 32,
            seed: 0,
            clip_norm: 5.0,
            window: e.window,
            horizon: e.horizon,
            n_experts: e.n_experts,
            hidden_dim: e.hidden_dim,
            n_layers: e.n_layers,
            head_hidden: e.head_hidden,
            gate_hidden: e.gate_hidden,
            temperature: e.temperature,
            noise_std: e.noise_std,
            pattern_sub_experts: p.experts.n_experts,
            pattern_hidden: p.experts.hidden_dim,
            center_seasonal: p.center_seasonal,
            loss: LossWeights::default(),
            regs: RegConfig::default(),
            baseline_hidden: None,
            enhance: EnhanceConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.loss.balance >= 0.0 && self.loss.diversity >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.model == ModelKind::PatternAware && self.mode == ModeKind::Discrete {
            return Err(Error::ModeMismatch("the pattern model supports continuous mode only".into()));
        }
        if self.baseline_hidden == Some(0) {
            return Err(Error::Config("baseline_hidden must be at least 1".into()));
        }
        self.enhance.validate()?;
        self.expert_config(1, OutputMode::Continuous).validate()
    }

    pub fn expert_config(&self, input_dim: usize, mode: OutputMode) -> ExpertConfig {
        ExpertConfig {
            n_experts: self.n_experts,
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            window: self.window,
            horizon: self.horizon,
            input_dim,
            temperature: self.temperature,
            noise_std: self.noise_std,
            head_hidden: self.head_hidden,
            gate_hidden: self.gate_hidden,
            mode,
        }
    }

    fn reg_weights(&self, period_len: usize) -> RegWeights {
        RegWeights {
            smooth: self.regs.smooth,
            persist: self.regs.persist,
            period: self.regs.period,
            sparse: self.regs.sparse,
            local: self.regs.local,
            hetero: self.regs.hetero,
            period_len,
        }
    }
}

/// Single bidirectional LSTM with a point head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointModel {
    pub lstm: BiLstm,
    pub head: Mlp,
    pub window: usize,
    pub input_dim: usize,
    pub horizon: usize,
    /// Per-step residual variance on the training set, used as the
    /// predictive spread.
    pub residual_var: Vec<f64>,
}

impl PointModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        window: usize,
        input_dim: usize,
        horizon: usize,
        hidden: usize,
        layers: usize,
        head_hidden: usize,
        r: &mut Rng,
    ) -> Self {
        let lstm = BiLstm::new(store, "point.lstm", input_dim, hidden, layers, r);
        let head = Mlp::new(store, "point.head", &[2 * hidden, head_hidden, horizon], r);
        Self {
            lstm,
            head,
            window,
            input_dim,
            horizon,
            residual_var: vec![1.0; horizon],
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let steps = split_steps(tape, x, self.window, self.input_dim)?;
        let h = self.lstm.forward(tape, p, &steps)?;
        self.head.forward(tape, p, h.last)
    }
}

/// Scalar parameter count of a [`PointModel`].
pub fn point_param_count(input_dim: usize, hidden: usize, layers: usize, head_hidden: usize, horizon: usize) -> usize {
    let cell = |inp: usize| inp * 4 * hidden + hidden * 4 * hidden + 4 * hidden;
    let mut n = 2 * cell(input_dim);
    for _ in 1..layers {
        n += 2 * cell(2 * hidden);
    }
    n + 2 * hidden * head_hidden + head_hidden + head_hidden * horizon + horizon
}

/// Largest baseline hidden size whose parameter count does not exceed `budget`.
pub fn matched_hidden(budget: usize, input_dim: usize, layers: usize, head_hidden: usize, horizon: usize) -> usize {
    let mut h = 1;
    while point_param_count(input_dim, h + 1, layers, head_hidden, horizon) <= budget {
        h += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Model {
    MultiExpert(MoeModel),
    PatternAware(PatternModel),
    PointLstm(PointModel),
}

impl Model {
    pub fn horizon(&self) -> usize {
        match self {
            Model::MultiExpert(m) => m.config.horizon,
            Model::PatternAware(m) => m.config.experts.horizon,
            Model::PointLstm(m) => m.horizon,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            Model::MultiExpert(m) => m.config.window,
            Model::PatternAware(m) => m.config.experts.window,
            Model::PointLstm(m) => m.window,
        }
    }

    pub fn mode(&self) -> OutputMode {
        match self {
            Model::MultiExpert(m) => m.config.mode,
            _ => OutputMode::Continuous,
        }
    }

    /// Gate noise for one batch, if the model has gates and noise is on.
    fn noise(&self, seed: u64, epoch: u64, ids: &[usize]) -> Option<Vec<Tensor>> {
        match self {
            Model::MultiExpert(m) if m.config.noise_std > 0.0 => Some(vec![gate_noise(
                seed,
                0,
                epoch,
                ids,
                m.config.n_experts,
                m.config.noise_std,
            )]),
            Model::PatternAware(m) if m.config.experts.noise_std > 0.0 => Some(
                (0..m.components.len())
                    .map(|c| {
                        gate_noise(
                            seed,
                            c as u64 + 1,
                            epoch,
                            ids,
                            m.config.experts.n_experts,
                            m.config.experts.noise_std,
                        )
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        targets: &BatchTargets,
        noise: Option<&[Tensor]>,
        weights: &LossWeights,
    ) -> Result<LossOutput> {
        match self {
            Model::MultiExpert(m) => m.loss(tape, p, x, targets, noise.map(|n| &n[0]), weights),
            Model::PatternAware(m) => m.loss(tape, p, x, targets, noise, weights),
            Model::PointLstm(m) => {
                let pred = m.forward(tape, p, x)?;
                let y = tape.constant(targets.mean.clone());
                let d = tape.sub(pred, y)?;
                let d2 = tape.square(d);
                let total = tape.mean(d2);
                let v = tape.value(total).item();
                Ok(LossOutput {
                    total,
                    parts: LossParts {
                        distance: v,
                        total: v,
                        ..LossParts::default()
                    },
                    gates: Vec::new(),
                })
            }
        }
    }

    /// Predictive distributions `[sample][step]` in model units.
    pub fn predict(&self, params: &ParamStore, x: &Tensor) -> Result<Vec<Vec<Predictive>>> {
        match self {
            Model::MultiExpert(m) => m.predict(params, x),
            Model::PatternAware(m) => Ok(m
                .predict(params, x)?
                .into_iter()
                .map(|row| row.into_iter().map(Predictive::Gaussian).collect())
                .collect()),
            Model::PointLstm(m) => {
                let pts = point_forward(m, params, x)?;
                pts.iter()
                    .map(|row| {
                        row.iter()
                            .zip(&m.residual_var)
                            .map(|(&mu, &v)| GaussianMixture1D::gaussian(mu, v).map(Predictive::Gaussian))
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

fn point_forward(m: &PointModel, params: &ParamStore, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = m.forward(&mut tape, &p, xv)?;
    let v = tape.value(out);
    Ok((0..v.rows).map(|r| v.row(r).to_vec()).collect())
}

/// Everything needed to run a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub scaler: Scaler,
    /// Seasonal period used by the model, when one was detected or set.
    pub period: Option<usize>,
}

impl Checkpoint {
    pub fn check_version(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    /// Share of targets inside the central 90% predictive interval.
    pub coverage_90: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_parts: LossParts,
    pub val_parts: LossParts,
    /// Mean gate weights over the training samples, per gate.
    pub utilization: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Number of epochs run.
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    /// Fingerprint of the restored parameters.
    pub params_fingerprint: u64,
    pub n_params: usize,
    /// Noise-free mean gate weights over the training set, per gate.
    pub final_utilization: Vec<Vec<f64>>,
    pub period: Option<usize>,
    pub clamped_labels: usize,
    pub test: Option<Metrics>,
}

/// Scaled data ready for batching.
#[derive(Debug, Clone)]
struct Prepared {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
    probs: Option<Vec<Vec<f64>>>,
}

impl Prepared {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, BatchTargets) {
        let rows = idx.len();
        let flat = |v: &Vec<Vec<f64>>| {
            let cols = v[idx[0]].len();
            let data = idx.iter().flat_map(|&i| v[i].iter().copied()).collect();
            Tensor { rows, cols, data }
        };
        (
            flat(&self.inputs),
            BatchTargets {
                mean: flat(&self.targets),
                var: flat(&self.var),
                probs: self.probs.as_ref().map(flat),
            },
        )
    }
}

/// Trains on one series and evaluates on its held-out tail.
pub fn train(config: &TrainConfig, series: &TimeSeries) -> Result<(Checkpoint, TrainReport)> {
    train_observed(config, series, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    config: &TrainConfig,
    series: &TimeSeries,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    let ds = make_windows(series, config.window, config.horizon)?;
    let (train_raw, val_raw, test_raw) = time_split(&ds, &config.split)?;
    let Labels {
        scaler,
        train_ds,
        val_ds,
        profile,
        period,
        mode,
        ..
    } = labels(config, series, &train_raw, &val_raw)?;
    let mut clamped_labels = 0;
    let mut prep = |d: &WindowedDataset| -> Result<Prepared> {
        let var: Vec<Vec<f64>> = (0..d.len())
            .map(|k| {
                let s = d.target_start(k);
                profile.variance[s..s + d.horizon].to_vec()
            })
            .collect();
        let probs = match mode {
            OutputMode::Continuous => None,
            OutputMode::Discrete { bins } => {
                let mut out = Vec::with_capacity(d.len());
                for (y, v) in d.targets.iter().zip(&var) {
                    let (t, c) = enhance::enhance_discrete(y, v, &bins)?;
                    clamped_labels += c;
                    out.push(t.into_iter().flat_map(|t| t.categorical.unwrap_or_default()).collect());
                }
                Some(out)
            }
        };
        Ok(Prepared {
            inputs: d.inputs.clone(),
            targets: d.targets.clone(),
            var,
            probs,
        })
    };
    let train_p = prep(&train_ds)?;
    let val_p = prep(&val_ds)?;

    let mut init = rng::stream(config.seed, &[INIT_LABEL]);
    let mut params = ParamStore::new();
    let expert_cfg = config.expert_config(series.dim(), mode);
    let mut model = match config.model {
        ModelKind::MultiExpert => Model::MultiExpert(MoeModel::new(expert_cfg, &mut params, &mut init)?),
        ModelKind::PatternAware => {
            let pc = PatternConfig {
                experts: ExpertConfig {
                    n_experts: config.pattern_sub_experts,
                    hidden_dim: config.pattern_hidden,
                    ..expert_cfg
                },
                // Without a detected period the periodicity term is switched off.
                regs: config.reg_weights(period.unwrap_or(config.horizon).max(2)),
                center_seasonal: config.center_seasonal,
            };
            Model::PatternAware(PatternModel::new(pc, &mut params, &mut init)?)
        }
        ModelKind::PointLstm => {
            let hidden = match config.baseline_hidden {
                Some(h) => h,
                None => {
                    let mut scratch = ParamStore::new();
                    let mut r = rng::stream(0, &[]);
                    MoeModel::new(expert_cfg, &mut scratch, &mut r)?;
                    matched_hidden(
                        scratch.num_scalars(),
                        series.dim(),
                        config.n_layers,
                        config.head_hidden,
                        config.horizon,
                    )
                }
            };
            Model::PointLstm(PointModel::new(
                &mut params,
                config.window,
                series.dim(),
                config.horizon,
                hidden,
                config.n_layers,
                config.head_hidden,
                &mut init,
            ))
        }
    };

    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(&params);
    let mut best: Option<(f64, usize, ParamStore, AdamState)> = None;
    let mut epochs = Vec::new();
    let mut wait = 0;
    let mut early_stopped = false;
    let mut order: Vec<usize> = (0..train_p.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, &[SHUFFLE_LABEL, epoch as u64]));
        let mut sums = PartsSum::default();
        let mut util: Vec<Vec<f64>> = Vec::new();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, targets) = train_p.batch(idx);
            let noise = model.noise(config.seed, epoch as u64, idx);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xv = tape.constant(x);
            let out = model.loss(&mut tape, &bound, xv, &targets, noise.as_deref(), &config.loss)?;
            if !out.parts.total.is_finite() {
                return Err(non_finite(epoch, b, &out.parts, "loss"));
            }
            accumulate_util(&mut util, &out.gates);
            sums.add(&out.parts, idx.len());
            let mut grads = tape.backward(out.total)?;
            let mut g = params.gradients(&bound, &mut grads);
            let norm = clip_global_norm(&mut g, config.clip_norm);
            if !norm.is_finite() {
                return Err(non_finite(epoch, b, &out.parts, "gradient"));
            }
            adam_step(&mut params, &g, &mut opt, &adam)?;
        }
        let n = train_p.len() as f64;
        for u in util.iter_mut() {
            u.iter_mut().for_each(|v| *v /= n);
        }
        let train_parts = sums.mean();
        let val_parts = evaluate_loss(&model, &params, &val_p, config)?;
        if !val_parts.total.is_finite() {
            return Err(non_finite(epoch, 0, &val_parts, "validation loss"));
        }
        let rec = EpochRecord {
            epoch,
            train_loss: train_parts.total,
            val_loss: val_parts.total,
            train_parts,
            val_parts,
            utilization: util,
        };
        observe(&rec);
        epochs.push(rec);
        let improved = best.as_ref().is_none_or(|(v, ..)| val_parts.total < *v);
        if improved {
            best = Some((val_parts.total, epoch, params.clone(), opt.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                early_stopped = true;
                break;
            }
        }
    }

    let stopped_epoch = epochs.len();
    let (best_val, best_epoch) = match best {
        Some((v, e, p, o)) => {
            params = p;
            opt = o;
            (Some(v), Some(e))
        }
        None => (None, None),
    };
    if let Model::PointLstm(m) = &mut model {
        m.residual_var = residual_variance(m, &params, &train_p)?;
    }
    let final_utilization = utilization(&model, &params, &train_p)?;
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        model,
        params,
        optimizer: opt,
        scaler,
        period,
    };
    let test = if test_raw.is_empty() {
        None
    } else {
        Some(evaluate(&checkpoint, &test_raw)?)
    };
    let report = TrainReport {
        epochs,
        stopped_epoch,
        early_stopped,
        best_epoch,
        best_val,
        params_fingerprint: checkpoint.params.fingerprint(),
        n_params: checkpoint.params.num_scalars(),
        final_utilization,
        period,
        clamped_labels,
        test,
    };
    Ok((checkpoint, report))
}

/// Scaling and label enhancement shared by training and [`enhance_series`].
struct Labels {
    scaler: Scaler,
    train_ds: WindowedDataset,
    val_ds: WindowedDataset,
    y_scaled: Vec<f64>,
    profile: enhance::VarianceProfile,
    period: Option<usize>,
    mode: OutputMode,
}

fn labels(
    config: &TrainConfig,
    series: &TimeSeries,
    train_raw: &WindowedDataset,
    val_raw: &WindowedDataset,
) -> Result<Labels> {
    let scaler = Scaler::fit(train_raw)?;
    let train_ds = scaler.transform(train_raw);
    let val_ds = scaler.transform(val_raw);

    // Label enhancement on the steps covered by training and validation targets.
    let fit_end = val_ds.target_start(val_ds.len() - 1) + config.horizon;
    let y_scaled: Vec<f64> = series.target()[..fit_end]
        .iter()
        .map(|&v| scaler.scale_target(v))
        .collect();
    let nodes: Vec<usize> = (0..train_ds.len()).map(|k| train_ds.target_start(k)).collect();
    let profile = enhance::variance_profile(&y_scaled, Some((&train_ds.inputs, &nodes)), &config.enhance)?;
    let period = config.regs.period_len.or(profile.period.map(|p| p.lag));
    let mode = match config.mode {
        ModeKind::Continuous => OutputMode::Continuous,
        ModeKind::Discrete => OutputMode::Discrete {
            bins: bins_for(config, &scaler, &y_scaled)?,
        },
    };
    Ok(Labels {
        scaler,
        train_ds,
        val_ds,
        y_scaled,
        profile,
        period,
        mode,
    })
}

/// Enhanced targets for the steps a training run fits on, in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedSeries {
    pub t: Vec<i64>,
    pub y: Vec<f64>,
    pub variance: Vec<f64>,
    /// Bin layout and per-step masses in discrete mode.
    pub bins: Option<Bins>,
    pub probs: Option<Vec<Vec<f64>>>,
    pub period: Option<usize>,
    pub clamped_labels: usize,
}

/// Runs the label enhancement that [`train`] would run on `series`.
pub fn enhance_series(config: &TrainConfig, series: &TimeSeries) -> Result<EnhancedSeries> {
    config.validate()?;
    let ds = make_windows(series, config.window, config.horizon)?;
    let (train_raw, val_raw, _) = time_split(&ds, &config.split)?;
    let l = labels(config, series, &train_raw, &val_raw)?;
    let n = l.y_scaled.len();
    let (a, b) = (l.scaler.target_std, l.scaler.target_mean);
    let variance = l.profile.variance.iter().map(|v| a * a * v).collect();
    let (bins, probs, clamped_labels) = match l.mode {
        OutputMode::Continuous => (None, None, 0),
        OutputMode::Discrete { bins } => {
            let (t, c) = enhance::enhance_discrete(&l.y_scaled, &l.profile.variance, &bins)?;
            let probs = t.into_iter().map(|t| t.categorical.unwrap_or_default()).collect();
            let orig = Bins {
                low: a * bins.low + b,
                high: a * bins.high + b,
                count: bins.count,
            };
            (Some(orig), Some(probs), c)
        }
    };
    Ok(EnhancedSeries {
        t: (0..n).map(|i| series.timestamp(i)).collect(),
        y: series.target()[..n].to_vec(),
        variance,
        bins,
        probs,
        period: l.period,
        clamped_labels,
    })
}

fn bins_for(config: &TrainConfig, scaler: &Scaler, y_scaled: &[f64]) -> Result<Bins> {
    let count = config.enhance.n_bins;
    let (low, high) = match config.enhance.bin_range {
        Some((lo, hi)) => (scaler.scale_target(lo), scaler.scale_target(hi)),
        None => {
            let lo = y_scaled.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y_scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pad = 0.05 * (hi - lo).max(1e-6);
            (lo - pad, hi + pad)
        }
    };
    if count < 2 || !(high > low) {
        return Err(Error::Config("discrete mode needs at least 2 bins over a non-empty range".into()));
    }
    Ok(Bins { low, high, count })
}

fn non_finite(epoch: usize, batch: usize, parts: &LossParts, what: &str) -> Error {
    Error::NonFiniteLoss {
        epoch,
        batch,
        detail: format!(
            "non-finite {what}: distance={} balance={} diversity={} regs={:?}",
            parts.distance, parts.balance, parts.diversity, parts.regs
        ),
    }
}

fn accumulate_util(acc: &mut Vec<Vec<f64>>, gates: &[Tensor]) {
    if acc.is_empty() {
        *acc = gates.iter().map(|g| vec![0.0; g.cols]).collect();
    }
    for (a, g) in acc.iter_mut().zip(gates) {
        for r in 0..g.rows {
            for (x, v) in a.iter_mut().zip(g.row(r)) {
                *x += v;
            }
        }
    }
}

/// Sample-weighted running sum of loss parts.
#[derive(Debug, Default)]
struct PartsSum {
    sum: LossParts,
    n: usize,
}

impl PartsSum {
    fn add(&mut self, p: &LossParts, n: usize) {
        let w = n as f64;
        self.sum.distance += w * p.distance;
        self.sum.balance += w * p.balance;
        self.sum.diversity += w * p.diversity;
        for (a, b) in self.sum.regs.iter_mut().zip(&p.regs) {
            *a += w * b;
        }
        self.sum.total += w * p.total;
        self.n += n;
    }

    fn mean(&self) -> LossParts {
        let n = self.n.max(1) as f64;
        let mut regs = self.sum.regs;
        regs.iter_mut().for_each(|r| *r /= n);
        LossParts {
            distance: self.sum.distance / n,
            balance: self.sum.balance / n,
            diversity: self.sum.diversity / n,
            regs,
            total: self.sum.total / n,
        }
    }
}

/// Composite loss without gate noise, batched in order.
fn evaluate_loss(model: &Model, params: &ParamStore, data: &Prepared, config: &TrainConfig) -> Result<LossParts> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sums = PartsSum::default();
    for chunk in idx.chunks(config.batch_size) {
        let (x, targets) = data.batch(chunk);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(x);
        let out = model.loss(&mut tape, &bound, xv, &targets, None, &config.loss)?;
        sums.add(&out.parts, chunk.len());
    }
    Ok(sums.mean())
}

fn utilization(model: &Model, params: &ParamStore, data: &Prepared) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut acc = Vec::new();
    for chunk in idx.chunks(INFER_CHUNK) {
        let (x, _) = data.batch(chunk);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.constant(x);
        let gates: Vec<Tensor> = match model {
            Model::MultiExpert(m) => {
                let f = m.forward(&mut tape, &p, xv, None)?;
                vec![tape.value(f.gate).clone()]
            }
            Model::PatternAware(m) => m
                .forward(&mut tape, &p, xv, None)?
                .iter()
                .map(|c| tape.value(c.gate).clone())
                .collect(),
            Model::PointLstm(_) => Vec::new(),
        };
        accumulate_util(&mut acc, &gates);
    }
    let n = data.len() as f64;
    for u in acc.iter_mut() {
        u.iter_mut().for_each(|v| *v /= n);
    }
    Ok(acc)
}

fn residual_variance(m: &PointModel, params: &ParamStore, data: &Prepared) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; m.horizon];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(INFER_CHUNK) {
        let (x, t) = data.batch(chunk);
        let pred = point_forward(m, params, &x)?;
        for (r, row) in pred.iter().enumerate() {
            for (h, p) in row.iter().enumerate() {
                let e = t.mean.at(r, h) - p;
                acc[h] += e * e;
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(acc
        .into_iter()
        .map(|v| (v / n).max(enhance::VARIANCE_FLOOR))
        .collect())
}

/// Point forecast and central interval of one predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

fn categorical_quantile(probs: &[f64], bins: &Bins, q: f64) -> f64 {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        if acc + p >= q && p > 0.0 {
            return bins.edge(k) + (q - acc) / p * bins.width();
        }
        acc += p;
    }
    bins.high
}

/// Forecasts in original units, `[pair][step]`, with `level` central
/// intervals (0.9 for 90%).
pub fn forecast(ckpt: &Checkpoint, ds: &WindowedDataset, level: f64) -> Result<Vec<Vec<Forecast>>> {
    ckpt.check_version()?;
    let h = ckpt.model.horizon();
    if ds.horizon != h || ds.window != ckpt.model.window() {
        return Err(Error::Config(format!(
            "dataset window/horizon {}/{} do not match the model's {}/{}",
            ds.window,
            ds.horizon,
            ckpt.model.window(),
            h
        )));
    }
    if ds.dim != ckpt.scaler.feature_mean.len() {
        return Err(Error::LengthMismatch {
            left: ds.dim,
            right: ckpt.scaler.feature_mean.len(),
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("interval level must lie in (0, 1), got {level}")));
    }
    let scaled = ckpt.scaler.transform(ds);
    let mode = ckpt.model.mode();
    let (a, b) = (ckpt.scaler.target_std, ckpt.scaler.target_mean);
    let (ql, qu) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut out = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(ds.len());
        let cols = scaled.inputs[start].len();
        let data = scaled.inputs[start..end].iter().flatten().copied().collect();
        let x = Tensor {
            rows: end - start,
            cols,
            data,
        };
        for preds in ckpt.model.predict(&ckpt.params, &x)? {
            let points = predict_point(&preds, &mode);
            let row = preds
                .iter()
                .zip(points)
                .map(|(p, pt)| {
                    let (lo, hi) = match (p, &mode) {
                        (Predictive::Gaussian(g), _) => (g.quantile(ql), g.quantile(qu)),
                        (Predictive::Categorical(c), OutputMode::Discrete { bins }) => (
                            categorical_quantile(c.probs(), bins, ql),
                            categorical_quantile(c.probs(), bins, qu),
                        ),
                        (Predictive::Categorical(_), OutputMode::Continuous) => (pt, pt),
                    };
                    Forecast {
                        point: a * pt + b,
                        lower: a * lo + b,
                        upper: a * hi + b,
                    }
                })
                .collect();
            out.push(row);
        }
    }
    Ok(out)
}

/// Point metrics and 90% interval coverage over every pair and step.
pub fn evaluate(ckpt: &Checkpoint, test: &WindowedDataset) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Data("evaluation needs at least one test pair".into()));
    }
    let fc = forecast(ckpt, test, 0.9)?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut inside = 0usize;
    for (row, y) in fc.iter().zip(&test.targets) {
        for (f, &t) in row.iter().zip(y) {
            pred.push(f.point);
            truth.push(t);
            if f.lower <= t && t <= f.upper {
                inside += 1;
            }
        }
    }
    Ok(Metrics {
        rmse: series::rmse(&pred, &truth)?,
        mae: series::mae(&pred, &truth)?,
        mape: series::mape(&pred, &truth)?,
        coverage_90: inside as f64 / truth.len() as f64,
        n_pairs: test.len(),
    })
}

/// Held-out pairs of `series` under the checkpoint's window and split.
pub fn test_split(ckpt: &Checkpoint, series: &TimeSeries) -> Result<WindowedDataset> {
    let ds = make_windows(series, ckpt.config.window, ckpt.config.horizon)?;
    Ok(time_split(&ds, &ckpt.config.split)?.2)
}

/// One row of a decomposition export: the first forecast step of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompRow {
    pub t: i64,
    pub y_true: f64,
    pub y_hat: f64,
    /// Trend, seasonal, changepoint, volatility, in original units. The
    /// target mean is carried by the trend.
    pub values: [f64; 4],
    pub uncertainties: [f64; 4],
}

/// Component breakdown of the first forecast step of every pair in `series`.
pub fn decompose_report(ckpt: &Checkpoint, series: &TimeSeries) -> Result<Vec<DecompRow>> {
    ckpt.check_version()?;
    let Model::PatternAware(model) = &ckpt.model else {
        return Err(Error::ModeMismatch("decomposition needs a pattern-aware checkpoint".into()));
    };
    let ds = make_windows(series, ckpt.config.window, ckpt.config.horizon)?;
    let scaled = ckpt.scaler.transform(&ds);
    let (a, b) = (ckpt.scaler.target_std, ckpt.scaler.target_mean);
    let mut rows = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(ds.len());
        let cols = scaled.inputs[start].len();
        let x = Tensor {
            rows: end - start,
            cols,
            data: scaled.inputs[start..end].iter().flatten().copied().collect(),
        };
        for (k, comps) in model.components_for(&ckpt.params, &x)?.iter().enumerate() {
            let pair = start + k;
            let mut values = [0.0; 4];
            let mut unc = [0.0; 4];
            for (i, c) in comps.iter().enumerate() {
                values[i] = a * c.value[0];
                unc[i] = a * a * c.uncertainty[0];
            }
            values[0] += b;
            let ts = ds.target_start(pair);
            rows.push(DecompRow {
                t: series.timestamp(ts),
                y_true: ds.targets[pair][0],
                y_hat: values.iter().sum(),
                values,
                uncertainties: unc,
            });
        }
    }
    Ok(rows)
}

/// One-line summary of loss parts.
pub fn describe(parts: &LossParts) -> String {
    format!(
        "total={:.6} distance={:.6} balance={:.6} diversity={:.6} regs={:?}",
        parts.total, parts.distance, parts.balance, parts.diversity, parts.regs
    )
}
