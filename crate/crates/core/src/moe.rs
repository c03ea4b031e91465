//! Multi-expert distribution forecaster: bidirectional LSTM experts with
//! Gaussian (or categorical) heads, a temperature-scaled softmax gate, and
//! the composite training loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dist::{self, CategoricalDist, GaussianMixture1D, KL_EPS};
use crate::enhance::{Bins, EnhancedTarget};
use crate::nn::{split_steps, BiLstm, Bound, Mlp, ParamStore};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Log-variance outputs are clamped to this range before exponentiation.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);

const GATE_NOISE_LABEL: u64 = 0x6761_7465;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputMode {
    Continuous,
    Discrete { bins: Bins },
}

impl OutputMode {
    pub fn n_bins(&self) -> Option<usize> {
        match self {
            OutputMode::Continuous => None,
            OutputMode::Discrete { bins } => Some(bins.count),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub n_experts: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub window: usize,
    pub horizon: usize,
    pub input_dim: usize,
    pub temperature: f64,
    pub noise_std: f64,
    pub head_hidden: usize,
    pub gate_hidden: usize,
    pub mode: OutputMode,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            hidden_dim: 128,
            n_layers: 2,
            window: 20,
            horizon: 28,
            input_dim: 1,
            temperature: 1.5,
            noise_std: 0.1,
            head_hidden: 64,
            gate_hidden: 32,
            mode: OutputMode::Continuous,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_experts", self.n_experts),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("window", self.window),
            ("horizon", self.horizon),
            ("input_dim", self.input_dim),
            ("head_hidden", self.head_hidden),
            ("gate_hidden", self.gate_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if let OutputMode::Discrete { bins } = self.mode {
            if bins.count < 2 || !(bins.high > bins.low) {
                return Err(Error::Config("discrete mode needs at least 2 bins over a non-empty range".into()));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.window * self.input_dim
    }
}

/// One expert's prediction for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub repr: Vec<f64>,
    /// `H x K` row-major, discrete mode only.
    pub logits: Option<Vec<f64>>,
}

/// Gate result for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Per-step predictive distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictive {
    Gaussian(GaussianMixture1D),
    Categorical(CategoricalDist),
}

/// A bidirectional LSTM encoder with a mean head and a variance (or
/// logits) head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub lstm: BiLstm,
    pub mean_head: Mlp,
    pub var_head: Mlp,
}

/// Expert nodes on a tape, all `batch x _`.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    /// `B x H` in continuous mode, `B x (H K)` logits in discrete mode.
    pub mu: Var,
    /// Clamped log-variance (continuous) or per-step probabilities (discrete).
    pub second: Var,
    pub repr: Var,
}

impl Expert {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ExpertConfig, hidden: usize, r: &mut Rng) -> Self {
        let lstm = BiLstm::new(store, &format!("{name}.lstm"), cfg.input_dim, hidden, cfg.n_layers, r);
        let d = lstm.output_dim();
        let (mean_out, var_out) = match cfg.mode {
            OutputMode::Continuous => (cfg.horizon, cfg.horizon),
            // One head emits the logits; the second head is unused.
            OutputMode::Discrete { bins } => (cfg.horizon * bins.count, 1),
        };
        let mean_head = Mlp::new(store, &format!("{name}.mean"), &[d, cfg.head_hidden, mean_out], r);
        let var_head = Mlp::new(store, &format!("{name}.var"), &[d, cfg.head_hidden, var_out], r);
        Self {
            lstm,
            mean_head,
            var_head,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, cfg: &ExpertConfig) -> Result<ExpertVars> {
        let steps = split_steps(tape, x, cfg.window, cfg.input_dim)?;
        let h = self.lstm.forward(tape, p, &steps)?;
        let repr = h.last;
        match cfg.mode {
            OutputMode::Continuous => {
                let mu = self.mean_head.forward(tape, p, repr)?;
                let lv = self.var_head.forward(tape, p, repr)?;
                let lv = tape.clamp(lv, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
                Ok(ExpertVars { mu, second: lv, repr })
            }
            OutputMode::Discrete { bins } => {
                let logits = self.mean_head.forward(tape, p, repr)?;
                let probs = tape.softmax_groups(logits, bins.count, 1.0)?;
                Ok(ExpertVars {
                    mu: logits,
                    second: probs,
                    repr,
                })
            }
        }
    }
}

/// The full multi-expert model; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: ExpertConfig,
    pub experts: Vec<Expert>,
    pub gate: Mlp,
}

/// Every node of one forward pass.
#[derive(Debug, Clone)]
pub struct MoeVars {
    pub experts: Vec<ExpertVars>,
    /// Pre-noise gate logits.
    pub gate_logits: Var,
    pub gate: Var,
    /// Gate columns, each `B x 1`.
    pub gate_cols: Vec<Var>,
}

impl MoeModel {
    pub fn new(config: ExpertConfig, store: &mut ParamStore, r: &mut Rng) -> Result<Self> {
        config.validate()?;
        let experts = (0..config.n_experts)
            .map(|i| Expert::new(store, &format!("expert{i}"), &config, config.hidden_dim, r))
            .collect();
        let gate = Mlp::new(
            store,
            "gate",
            &[config.input_width(), config.gate_hidden, config.n_experts],
            r,
        );
        Ok(Self { config, experts, gate })
    }

    /// Forward pass for a `B x (w d)` batch. `noise`, when given, is added
    /// to the gate logits before the softmax.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, noise: Option<&Tensor>) -> Result<MoeVars> {
        let cfg = &self.config;
        let (b, cols) = tape.shape(x);
        if cols != cfg.input_width() {
            return Err(Error::Shape {
                op: "moe_forward",
                lhs: (b, cols),
                rhs: (b, cfg.input_width()),
            });
        }
        let experts = self
            .experts
            .iter()
            .map(|e| e.forward(tape, p, x, cfg))
            .collect::<Result<Vec<_>>>()?;
        let (gate_logits, gate) = gate_forward(tape, p, &self.gate, x, noise, cfg.temperature)?;
        let gate_cols = (0..cfg.n_experts)
            .map(|i| tape.slice(gate, i, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(MoeVars {
            experts,
            gate_logits,
            gate,
            gate_cols,
        })
    }

    /// Per-sample expert and gate outputs for a `B x (w d)` batch.
    pub fn infer(&self, params: &ParamStore, x: &Tensor, noise: Option<&Tensor>) -> Result<(Vec<Vec<ExpertOutput>>, Vec<GateOutput>)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, &p, xv, noise)?;
        let h = self.config.horizon;
        let mut experts = Vec::with_capacity(x.rows);
        let mut gates = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row: Vec<ExpertOutput> = f
                .experts
                .iter()
                .map(|e| {
                    let repr = tape.value(e.repr).row(r).to_vec();
                    match self.config.mode {
                        OutputMode::Continuous => ExpertOutput {
                            mu: tape.value(e.mu).row(r).to_vec(),
                            log_var: tape.value(e.second).row(r).to_vec(),
                            repr,
                            logits: None,
                        },
                        OutputMode::Discrete { .. } => ExpertOutput {
                            mu: vec![0.0; h],
                            log_var: vec![0.0; h],
                            repr,
                            logits: Some(tape.value(e.mu).row(r).to_vec()),
                        },
                    }
                })
                .collect();
            experts.push(row);
            gates.push(GateOutput {
                weights: tape.value(f.gate).row(r).to_vec(),
                logits: tape.value(f.gate_logits).row(r).to_vec(),
            });
        }
        Ok((experts, gates))
    }

    /// Predictive distributions, `[sample][step]`, with noise off.
    pub fn predict(&self, params: &ParamStore, x: &Tensor) -> Result<Vec<Vec<Predictive>>> {
        let (experts, gates) = self.infer(params, x, None)?;
        experts
            .iter()
            .zip(&gates)
            .map(|(e, g)| mixture_assemble(e, g, &self.config.mode))
            .collect()
    }

    /// Composite loss on a batch. `noise` is the training-time gate noise.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        targets: &BatchTargets,
        noise: Option<&Tensor>,
        weights: &LossWeights,
    ) -> Result<LossOutput> {
        let f = self.forward(tape, p, x, noise)?;
        let distance = match self.config.mode {
            OutputMode::Continuous => {
                let means: Vec<Var> = f.experts.iter().map(|e| e.mu).collect();
                let vars: Vec<Var> = f.experts.iter().map(|e| tape.exp(e.second)).collect();
                let kappa = batch_bandwidth(&targets.mean.data);
                let tm = tape.constant(targets.mean.clone());
                let tv = tape.constant(targets.var.clone());
                mmd_mixture_loss(tape, &f.gate_cols, &means, &vars, tm, tv, kappa)?
            }
            OutputMode::Discrete { bins } => {
                let probs = targets
                    .probs
                    .as_ref()
                    .ok_or_else(|| Error::ModeMismatch("discrete model needs categorical targets".into()))?;
                let comps: Vec<Var> = f.experts.iter().map(|e| e.second).collect();
                let mix = weighted_sum(tape, &f.gate_cols, &comps)?;
                kl_mixture_loss(tape, probs, mix, bins.count)?
            }
        };
        let balance = balance_loss(tape, f.gate);
        let reprs: Vec<Var> = f.experts.iter().map(|e| e.repr).collect();
        let diversity = diversity_loss(tape, &reprs)?;
        let sb = tape.scale(balance, weights.balance);
        let sd = tape.scale(diversity, weights.diversity);
        let t = tape.add(distance, sb)?;
        let total = tape.add(t, sd)?;
        let util = tape.value(f.gate).clone();
        Ok(LossOutput {
            total,
            parts: LossParts {
                distance: tape.value(distance).item(),
                balance: tape.value(balance).item(),
                diversity: tape.value(diversity).item(),
                regs: [0.0; 4],
                total: tape.value(total).item(),
            },
            gates: vec![util],
        })
    }
}

/// Gate logits (before noise) and weights for a `B x (w d)` batch.
pub fn gate_forward(
    tape: &mut Tape,
    p: &Bound,
    gate: &Mlp,
    x: Var,
    noise: Option<&Tensor>,
    temperature: f64,
) -> Result<(Var, Var)> {
    let logits = gate.forward(tape, p, x)?;
    let noisy = match noise {
        Some(n) => {
            let nv = tape.constant(n.clone());
            tape.add(logits, nv)?
        }
        None => logits,
    };
    let g = tape.softmax_with_temperature(noisy, temperature)?;
    Ok((logits, g))
}

/// Gate logit noise for the samples `ids` in `epoch`; `group` tells apart
/// several gates of one model. Each sample draws from its own stream, so
/// the noise does not depend on batch layout.
pub fn gate_noise(seed: u64, group: u64, epoch: u64, ids: &[usize], n: usize, std: f64) -> Tensor {
    let mut data = Vec::with_capacity(ids.len() * n);
    for &id in ids {
        let mut r = rng::stream(seed, &[GATE_NOISE_LABEL, group, epoch, id as u64]);
        for _ in 0..n {
            data.push(std * rng::normal(&mut r));
        }
    }
    Tensor {
        rows: ids.len(),
        cols: n,
        data,
    }
}

/// Batch targets in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    /// `B x H` observed values (and Gaussian target means).
    pub mean: Tensor,
    /// `B x H` enhanced variances.
    pub var: Tensor,
    /// `B x (H K)` categorical targets in discrete mode.
    pub probs: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub balance: f64,
    pub diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            balance: 0.01,
            diversity: 0.001,
        }
    }
}

/// Scalar values of the loss terms (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub distance: f64,
    pub balance: f64,
    pub diversity: f64,
    /// Trend, seasonal, changepoint, volatility regularizers (weighted).
    pub regs: [f64; 4],
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub parts: LossParts,
    /// Gate weights per gated group, each `B x n`.
    pub gates: Vec<Tensor>,
}

/// Kernel bandwidth for a batch: median heuristic over target means.
pub fn batch_bandwidth(target_means: &[f64]) -> f64 {
    dist::bandwidth_or_default(target_means)
}

/// `Σ_i w_i x_i` with `w_i` of shape `B x 1`.
pub fn weighted_sum(tape: &mut Tape, weights: &[Var], xs: &[Var]) -> Result<Var> {
    if weights.len() != xs.len() || xs.is_empty() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: xs.len(),
        });
    }
    let mut acc = tape.mul(xs[0], weights[0])?;
    for (&w, &x) in weights.iter().zip(xs).skip(1) {
        let t = tape.mul(x, w)?;
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Kernel expectation between two Gaussians, elementwise:
/// `κ / sqrt(s + κ²) · exp(-d² / (2 (s + κ²)))` where `s` is the summed
/// variance and `d` the mean gap (`None` for zero gap).
fn gauss_kernel(tape: &mut Tape, d: Option<Var>, s: Var, kappa: f64) -> Result<Var> {
    let s2 = tape.add_scalar(s, kappa * kappa);
    let r = tape.powf(s2, -0.5);
    let a = tape.scale(r, kappa);
    match d {
        None => Ok(a),
        Some(d) => {
            let d2 = tape.square(d);
            let q = tape.div(d2, s2)?;
            let q = tape.scale(q, -0.5);
            let e = tape.exp(q);
            tape.mul(a, e)
        }
    }
}

/// Mean over all `B x H` entries of the closed-form MMD² between the
/// mixture `Σ_i w_i N(means_i, vars_i)` and `N(t_mean, t_var)`.
pub fn mmd_mixture_loss(
    tape: &mut Tape,
    weights: &[Var],
    means: &[Var],
    vars: &[Var],
    t_mean: Var,
    t_var: Var,
    kappa: f64,
) -> Result<Var> {
    let n = means.len();
    if n == 0 || weights.len() != n || vars.len() != n {
        return Err(Error::LengthMismatch {
            left: means.len(),
            right: weights.len().min(vars.len()),
        });
    }
    if !(kappa > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    // E[k(X, X')] for X, X' from the mixture.
    let mut pp: Option<Var> = None;
    for i in 0..n {
        for j in i..n {
            let s = tape.add(vars[i], vars[j])?;
            let d = if i == j {
                None
            } else {
                Some(tape.sub(means[i], means[j])?)
            };
            let k = gauss_kernel(tape, d, s, kappa)?;
            let w = tape.mul(weights[i], weights[j])?;
            let w = if i == j { w } else { tape.scale(w, 2.0) };
            let term = tape.mul(k, w)?;
            pp = Some(match pp {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let pp = pp.expect("n >= 1");
    let tt = tape.scale(t_var, 2.0);
    let qq = gauss_kernel(tape, None, tt, kappa)?;
    let mut pq: Option<Var> = None;
    for i in 0..n {
        let s = tape.add(vars[i], t_var)?;
        let d = tape.sub(means[i], t_mean)?;
        let k = gauss_kernel(tape, Some(d), s, kappa)?;
        let term = tape.mul(k, weights[i])?;
        pq = Some(match pq {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let pq = tape.scale(pq.expect("n >= 1"), 2.0);
    let m = tape.add(pp, qq)?;
    let m = tape.sub(m, pq)?;
    Ok(tape.mean(m))
}

/// Mean over samples and steps of `KL(target || pred)`. `target` and
/// `pred` are `B x (H K)`, each group of `K` a distribution.
pub fn kl_mixture_loss(tape: &mut Tape, target: &Tensor, pred: Var, k: usize) -> Result<Var> {
    let shape = tape.shape(pred);
    if target.shape() != shape || k == 0 || !shape.1.is_multiple_of(k) {
        return Err(Error::Shape {
            op: "kl_mixture_loss",
            lhs: target.shape(),
            rhs: shape,
        });
    }
    let groups = (shape.0 * shape.1 / k) as f64;
    let z = 1.0 + KL_EPS * k as f64;
    let entropy_part: f64 = target
        .data
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * Float::ln(p * z))
        .sum();
    let q = tape.add_scalar(pred, KL_EPS);
    let lq = tape.log(q);
    let t = tape.constant(target.clone());
    let cross = tape.mul(lq, t)?;
    let cross = tape.sum(cross);
    let neg = tape.neg(cross);
    let total = tape.add_scalar(neg, entropy_part);
    Ok(tape.scale(total, 1.0 / groups))
}

/// Population variance of the batch-mean utilization of a `B x N` gate.
pub fn balance_loss(tape: &mut Tape, gate: Var) -> Var {
    let u = tape.mean_rows(gate);
    tape.variance(u)
}

/// Sum over ordered pairs `i != j` of the cosine similarity between
/// batch-averaged representations.
pub fn diversity_loss(tape: &mut Tape, reprs: &[Var]) -> Result<Var> {
    let means: Vec<Var> = reprs.iter().map(|&r| tape.mean_rows(r)).collect();
    let mut acc: Option<Var> = None;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let c = tape.cosine_similarity(means[i], means[j])?;
            acc = Some(match acc {
                None => c,
                Some(a) => tape.add(a, c)?,
            });
        }
    }
    Ok(match acc {
        Some(a) => tape.scale(a, 2.0),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Per-step predictive distributions from one sample's expert outputs.
pub fn mixture_assemble(outputs: &[ExpertOutput], gate: &GateOutput, mode: &OutputMode) -> Result<Vec<Predictive>> {
    if outputs.is_empty() || outputs.len() != gate.weights.len() {
        return Err(Error::LengthMismatch {
            left: outputs.len(),
            right: gate.weights.len(),
        });
    }
    let h = outputs[0].mu.len();
    match mode {
        OutputMode::Continuous => (0..h)
            .map(|t| {
                let means = outputs.iter().map(|o| o.mu[t]).collect();
                let vars = outputs
                    .iter()
                    .map(|o| Float::exp(o.log_var[t].clamp(LOG_VAR_RANGE.0, LOG_VAR_RANGE.1)))
                    .collect();
                GaussianMixture1D::new(gate.weights.clone(), means, vars).map(Predictive::Gaussian)
            })
            .collect(),
        OutputMode::Discrete { bins } => {
            let k = bins.count;
            let soft: Vec<Vec<f64>> = outputs
                .iter()
                .map(|o| {
                    let l = o
                        .logits
                        .as_ref()
                        .ok_or_else(|| Error::ModeMismatch("expert output has no logits".into()))?;
                    if l.len() != h * k {
                        return Err(Error::LengthMismatch {
                            left: l.len(),
                            right: h * k,
                        });
                    }
                    Ok(l.chunks(k).flat_map(softmax).collect())
                })
                .collect::<Result<_>>()?;
            (0..h)
                .map(|t| {
                    let mut probs = vec![0.0; k];
                    for (s, &g) in soft.iter().zip(&gate.weights) {
                        for (p, v) in probs.iter_mut().zip(&s[t * k..(t + 1) * k]) {
                            *p += g * v;
                        }
                    }
                    CategoricalDist::new(probs).map(Predictive::Categorical)
                })
                .collect()
        }
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| Float::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mixture mean per step, or expected bin centre in discrete mode.
pub fn predict_point(preds: &[Predictive], mode: &OutputMode) -> Vec<f64> {
    preds
        .iter()
        .map(|p| match (p, mode) {
            (Predictive::Gaussian(g), _) => g.mean(),
            (Predictive::Categorical(c), OutputMode::Discrete { bins }) => {
                c.probs().iter().enumerate().map(|(k, p)| p * bins.center(k)).sum()
            }
            (Predictive::Categorical(c), OutputMode::Continuous) => {
                c.probs().iter().enumerate().map(|(k, p)| p * k as f64).sum()
            }
        })
        .collect()
}

/// Mean of `mmd2_closed(pred, N(target))` over paired distributions.
pub fn loss_distance(preds: &[GaussianMixture1D], targets: &[EnhancedTarget], kappa: f64) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let q = GaussianMixture1D::gaussian(t.mean, t.variance)?;
        s += dist::mmd2_closed(p, &q, kappa)?;
    }
    Ok(s / preds.len() as f64)
}

/// Mean of `KL(target || pred)` over paired categoricals.
pub fn loss_distance_discrete(preds: &[CategoricalDist], targets: &[EnhancedTarget]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let c = t
            .categorical
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch("target has no categorical form".into()))?;
        s += dist::kl_categorical(&CategoricalDist::new(c.clone())?, p)?;
    }
    Ok(s / preds.len() as f64)
}

/// Population variance of mean utilization, from `[sample][expert]` gates.
pub fn loss_balance(gates: &[Vec<f64>]) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    let n = gates[0].len();
    let b = gates.len() as f64;
    let u: Vec<f64> = (0..n).map(|i| gates.iter().map(|g| g[i]).sum::<f64>() / b).collect();
    let m = u.iter().sum::<f64>() / n as f64;
    u.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64
}

/// Ordered-pair cosine sum over representations.
pub fn loss_diversity(reprs: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| Float::sqrt(v.iter().map(|x| x * x).sum::<f64>()) + crate::autodiff::COSINE_EPS;
    let mut s = 0.0;
    for i in 0..reprs.len() {
        for j in 0..reprs.len() {
            if i != j {
                let dot: f64 = reprs[i].iter().zip(&reprs[j]).map(|(a, b)| a * b).sum();
                s += dot / (norm(&reprs[i]) * norm(&reprs[j]));
            }
        }
    }
    s
}

pub fn loss_total(distance: f64, balance: f64, diversity: f64, w: &LossWeights) -> f64 {
    distance + w.balance * balance + w.diversity * diversity
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: OutputMode) -> ExpertConfig {
        ExpertConfig {
            n_experts: 3,
            hidden_dim: 4,
            n_layers: 1,
            window: 5,
            horizon: 3,
            input_dim: 1,
            head_hidden: 4,
            gate_hidden: 4,
            mode,
            ..ExpertConfig::default()
        }
    }

    #[test]
    fn shapes_and_gate() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, &[]);
        let m = MoeModel::new(small(OutputMode::Continuous), &mut store, &mut r).unwrap();
        let x = Tensor::new(2, 5, (0..10).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (e, g) = m.infer(&store, &x, None).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].len(), 3);
        assert_eq!(e[0][0].mu.len(), 3);
        assert_eq!(e[0][0].repr.len(), 8);
        let s: f64 = g[1].weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let bad = Tensor::zeros(2, 4);
        assert!(m.infer(&store, &bad, None).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let a = gate_noise(3, 0, 1, &[0, 5], 4, 0.1);
        let b = gate_noise(3, 0, 1, &[5], 4, 0.1);
        assert_eq!(&a.data[4..], &b.data[..]);
        assert_ne!(gate_noise(3, 0, 2, &[5], 4, 0.1).data, b.data);
        assert_ne!(gate_noise(3, 1, 1, &[5], 4, 0.1).data, b.data);
    }

    #[test]
    fn two_component_moments() {
        let o = |m: f64| ExpertOutput {
            mu: vec![m],
            log_var: vec![0.0],
            repr: vec![1.0],
            logits: None,
        };
        let g = GateOutput {
            weights: vec![0.5, 0.5],
            logits: vec![0.0, 0.0],
        };
        let p = mixture_assemble(&[o(0.0), o(2.0)], &g, &OutputMode::Continuous).unwrap();
        match &p[0] {
            Predictive::Gaussian(m) => {
                assert!((m.mean() - 1.0).abs() < 1e-15);
                assert!((m.variance() - 2.0).abs() < 1e-15);
            }
            _ => unreachable!(),
        }
        assert_eq!(predict_point(&p, &OutputMode::Continuous), vec![1.0]);
    }

    #[test]
    fn balance_and_diversity_values() {
        assert_eq!(loss_balance(&[vec![1.0, 0.0], vec![1.0, 0.0]]), 0.25);
        assert_eq!(loss_balance(&[vec![0.5, 0.5]]), 0.0);
        assert!((loss_diversity(&[vec![1.0, 2.0], vec![1.0, 2.0]]) - 2.0).abs() < 1e-10);
        assert!((loss_diversity(&[vec![1.0, 2.0], vec![-1.0, -2.0]]) + 2.0).abs() < 1e-10);
        assert_eq!(loss_diversity(&[vec![1.0, 0.0], vec![0.0, 3.0]]), 0.0);
    }

    #[test]
    fn tape_mmd_matches_closed_form() {
        let mut tape = Tape::new();
        let w = [
            tape.constant(Tensor::new(2, 1, vec![0.3, 0.9]).unwrap()),
            tape.constant(Tensor::new(2, 1, vec![0.7, 0.1]).unwrap()),
        ];
        let mu = [
            tape.constant(Tensor::new(2, 2, vec![0.0, 1.0, -0.5, 2.0]).unwrap()),
            tape.constant(Tensor::new(2, 2, vec![1.5, -1.0, 0.2, 0.0]).unwrap()),
        ];
        let var = [
            tape.constant(Tensor::new(2, 2, vec![1.0, 0.5, 2.0, 0.1]).unwrap()),
            tape.constant(Tensor::new(2, 2, vec![0.3, 0.4, 1.0, 1.2]).unwrap()),
        ];
        let tm = Tensor::new(2, 2, vec![0.2, 0.4, -1.0, 1.0]).unwrap();
        let tv = Tensor::new(2, 2, vec![0.5, 0.6, 0.7, 0.8]).unwrap();
        let tmv = tape.constant(tm.clone());
        let tvv = tape.constant(tv.clone());
        let l = mmd_mixture_loss(&mut tape, &w, &mu, &var, tmv, tvv, 0.8).unwrap();
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for b in 0..2 {
            for t in 0..2 {
                let ws = vec![tape.value(w[0]).at(b, 0), tape.value(w[1]).at(b, 0)];
                let ms = vec![tape.value(mu[0]).at(b, t), tape.value(mu[1]).at(b, t)];
                let vs = vec![tape.value(var[0]).at(b, t), tape.value(var[1]).at(b, t)];
                preds.push(GaussianMixture1D::new(ws, ms, vs).unwrap());
                targets.push(EnhancedTarget {
                    mean: tm.at(b, t),
                    variance: tv.at(b, t),
                    categorical: None,
                });
            }
        }
        let want = loss_distance(&preds, &targets, 0.8).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-14);
    }

    #[test]
    fn discrete_mode_forward() {
        let bins = Bins {
            low: -2.0,
            high: 2.0,
            count: 4,
        };
        let mode = OutputMode::Discrete { bins };
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, &[]);
        let m = MoeModel::new(small(mode), &mut store, &mut r).unwrap();
        let x = Tensor::new(1, 5, vec![0.1, 0.2, 0.3, 0.2, 0.1]).unwrap();
        let p = m.predict(&store, &x).unwrap();
        assert_eq!(p[0].len(), 3);
        let pt = predict_point(&p[0], &mode);
        assert!(pt.iter().all(|v| *v > -2.0 && *v < 2.0));
    }
}
