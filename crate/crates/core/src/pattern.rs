//! Additive trend + seasonal + changepoint + volatility forecaster. Each
//! component is a small gated mixture of LSTM sub-experts with its own
//! structural regularizer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dist::GaussianMixture1D;
use crate::moe::{
    balance_loss, batch_bandwidth, diversity_loss, gate_forward, mmd_mixture_loss, BatchTargets,
    Expert, ExpertConfig, LossOutput, LossParts, LossWeights, OutputMode,
};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Trend,
    Seasonal,
    Changepoint,
    Volatility,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 4] = [
        ComponentKind::Trend,
        ComponentKind::Seasonal,
        ComponentKind::Changepoint,
        ComponentKind::Volatility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Trend => "trend",
            ComponentKind::Seasonal => "seasonal",
            ComponentKind::Changepoint => "changepoint",
            ComponentKind::Volatility => "volatility",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub smooth: f64,
    pub persist: f64,
    pub period: f64,
    pub sparse: f64,
    pub local: f64,
    pub hetero: f64,
    /// Seasonal period in steps.
    pub period_len: usize,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            smooth: 0.01,
            persist: 0.01,
            period: 0.01,
            sparse: 0.01,
            local: 0.01,
            hetero: 0.01,
            period_len: 7,
        }
    }
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.smooth, self.persist, self.period, self.sparse, self.local, self.hetero];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("regularizer weights must be finite and non-negative".into()));
        }
        if self.period_len < 2 {
            return Err(Error::Config(format!("seasonal period must be at least 2, got {}", self.period_len)));
        }
        Ok(())
    }

    pub fn zero(period_len: usize) -> Self {
        Self {
            smooth: 0.0,
            persist: 0.0,
            period: 0.0,
            sparse: 0.0,
            local: 0.0,
            hetero: 0.0,
            period_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternConfig {
    /// Shared LSTM settings; `n_experts` and `hidden_dim` apply per component.
    pub experts: ExpertConfig,
    pub regs: RegWeights,
    /// Subtract the seasonal output's mean over its first period so the
    /// level is carried by the other components.
    pub center_seasonal: bool,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            experts: ExpertConfig {
                n_experts: 2,
                hidden_dim: 32,
                ..ExpertConfig::default()
            },
            regs: RegWeights::default(),
            center_seasonal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub kind: ComponentKind,
    pub subs: Vec<Expert>,
    pub gate: Mlp,
}

/// One component's values for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentOutput {
    pub kind: ComponentKind,
    pub value: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub gate: Vec<f64>,
}

/// Component nodes on a tape.
#[derive(Debug, Clone)]
pub struct ComponentVars {
    /// `B x H`.
    pub value: Var,
    /// `B x H`, gate-weighted mixture variance.
    pub uncertainty: Var,
    /// `B x S`.
    pub gate: Var,
    pub reprs: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternModel {
    pub config: PatternConfig,
    pub components: Vec<Component>,
}

impl PatternModel {
    pub fn new(config: PatternConfig, store: &mut ParamStore, r: &mut Rng) -> Result<Self> {
        config.experts.validate()?;
        config.regs.validate()?;
        if config.experts.mode != OutputMode::Continuous {
            return Err(Error::ModeMismatch("the pattern model forecasts continuous values only".into()));
        }
        let e = &config.experts;
        let components = ComponentKind::ALL
            .iter()
            .map(|&kind| {
                let name = kind.name();
                let subs = (0..e.n_experts)
                    .map(|s| Expert::new(store, &format!("{name}.sub{s}"), e, e.hidden_dim, r))
                    .collect();
                let gate = Mlp::new(
                    store,
                    &format!("{name}.gate"),
                    &[e.input_width(), e.gate_hidden, e.n_experts],
                    r,
                );
                Component { kind, subs, gate }
            })
            .collect();
        Ok(Self { config, components })
    }

    fn component_forward(
        &self,
        c: &Component,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        noise: Option<&Tensor>,
    ) -> Result<ComponentVars> {
        let e = &self.config.experts;
        let outs = c
            .subs
            .iter()
            .map(|s| s.forward(tape, p, x, e))
            .collect::<Result<Vec<_>>>()?;
        let (_, gate) = gate_forward(tape, p, &c.gate, x, noise, e.temperature)?;
        let cols = (0..outs.len())
            .map(|i| tape.slice(gate, i, i + 1))
            .collect::<Result<Vec<_>>>()?;
        let mut value = tape.mul(outs[0].mu, cols[0])?;
        for (o, &g) in outs.iter().zip(&cols).skip(1) {
            let t = tape.mul(o.mu, g)?;
            value = tape.add(value, t)?;
        }
        // Law of total variance across sub-experts.
        let mut unc: Option<Var> = None;
        for (o, &g) in outs.iter().zip(&cols) {
            let v = tape.exp(o.second);
            let d = tape.sub(o.mu, value)?;
            let d2 = tape.square(d);
            let s = tape.add(v, d2)?;
            let t = tape.mul(s, g)?;
            unc = Some(match unc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        let uncertainty = unc.expect("at least one sub-expert");
        if c.kind == ComponentKind::Seasonal && self.config.center_seasonal {
            let m = self.config.regs.period_len.min(e.horizon);
            let head = tape.slice(value, 0, m)?;
            let s = tape.sum_cols(head);
            let mean = tape.scale(s, 1.0 / m as f64);
            value = tape.sub(value, mean)?;
        }
        Ok(ComponentVars {
            value,
            uncertainty,
            gate,
            reprs: outs.iter().map(|o| o.repr).collect(),
        })
    }

    /// All four components for a `B x (w d)` batch. `noise` holds one
    /// tensor per component.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, noise: Option<&[Tensor]>) -> Result<Vec<ComponentVars>> {
        let e = &self.config.experts;
        let (b, cols) = tape.shape(x);
        if cols != e.input_width() {
            return Err(Error::Shape {
                op: "pattern_forward",
                lhs: (b, cols),
                rhs: (b, e.input_width()),
            });
        }
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| self.component_forward(c, tape, p, x, noise.map(|n| &n[i])))
            .collect()
    }

    /// Per-sample component outputs with noise off, `[sample][component]`.
    pub fn components_for(&self, params: &ParamStore, x: &Tensor) -> Result<Vec<Vec<ComponentOutput>>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, &p, xv, None)?;
        Ok((0..x.rows)
            .map(|r| {
                f.iter()
                    .zip(&self.components)
                    .map(|(v, c)| ComponentOutput {
                        kind: c.kind,
                        value: tape.value(v.value).row(r).to_vec(),
                        uncertainty: tape.value(v.uncertainty).row(r).to_vec(),
                        gate: tape.value(v.gate).row(r).to_vec(),
                    })
                    .collect()
            })
            .collect())
    }

    /// Predictive Gaussians `[sample][step]` with noise off.
    pub fn predict(&self, params: &ParamStore, x: &Tensor) -> Result<Vec<Vec<GaussianMixture1D>>> {
        self.components_for(params, x)?
            .iter()
            .map(|c| additive_combine(c).map(|(d, _)| d))
            .collect()
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
        let comps = self.forward(tape, p, x, noise)?;
        let (b, h) = targets.mean.shape();
        let mut mean = comps[0].value;
        let mut var = comps[0].uncertainty;
        for c in &comps[1..] {
            mean = tape.add(mean, c.value)?;
            var = tape.add(var, c.uncertainty)?;
        }
        let kappa = batch_bandwidth(&targets.mean.data);
        let tm = tape.constant(targets.mean.clone());
        let tv = tape.constant(targets.var.clone());
        let one = tape.constant(Tensor::filled(b, 1, 1.0));
        let distance = mmd_mixture_loss(tape, &[one], &[mean], &[var], tm, tv, kappa)?;

        let mut balance = None;
        let mut diversity = None;
        for c in &comps {
            let bl = balance_loss(tape, c.gate);
            let dv = diversity_loss(tape, &c.reprs)?;
            balance = Some(match balance {
                None => bl,
                Some(a) => tape.add(a, bl)?,
            });
            diversity = Some(match diversity {
                None => dv,
                Some(a) => tape.add(a, dv)?,
            });
        }
        let (balance, diversity) = (balance.expect("four components"), diversity.expect("four components"));

        // Per-step batch-mean squared residual of the point forecast.
        let pm = tape.value(mean);
        let mut resid = vec![0.0; h];
        for r in 0..b {
            for (t, v) in resid.iter_mut().enumerate() {
                let e = targets.mean.at(r, t) - pm.at(r, t);
                *v += e * e / b as f64;
            }
        }
        let rw = &self.config.regs;
        let regs = [
            reg_trend_tape(tape, comps[0].value, rw)?,
            reg_seasonal_tape(tape, comps[1].value, rw)?,
            reg_changepoint_tape(tape, comps[2].value, rw)?,
            reg_volatility_tape(tape, comps[3].value, &resid, rw)?,
        ];

        let sb = tape.scale(balance, weights.balance);
        let sd = tape.scale(diversity, weights.diversity);
        let mut total = tape.add(distance, sb)?;
        total = tape.add(total, sd)?;
        for &r in &regs {
            total = tape.add(total, r)?;
        }
        let gates = comps.iter().map(|c| tape.value(c.gate).clone()).collect();
        Ok(LossOutput {
            total,
            parts: LossParts {
                distance: tape.value(distance).item(),
                balance: tape.value(balance).item(),
                diversity: tape.value(diversity).item(),
                regs: [
                    tape.value(regs[0]).item(),
                    tape.value(regs[1]).item(),
                    tape.value(regs[2]).item(),
                    tape.value(regs[3]).item(),
                ],
                total: tape.value(total).item(),
            },
            gates,
        })
    }
}

/// Per-step Gaussian with summed means and variances, plus the point
/// forecast. Components must be exactly one of each kind.
pub fn additive_combine(components: &[ComponentOutput]) -> Result<(Vec<GaussianMixture1D>, Vec<f64>)> {
    for kind in ComponentKind::ALL {
        if components.iter().filter(|c| c.kind == kind).count() != 1 {
            return Err(Error::Config(format!("need exactly one {} component", kind.name())));
        }
    }
    let h = components[0].value.len();
    if components.iter().any(|c| c.value.len() != h || c.uncertainty.len() != h) {
        return Err(Error::Data("component outputs differ in length".into()));
    }
    let mut point = vec![0.0; h];
    let mut var = vec![0.0; h];
    for c in components {
        for t in 0..h {
            point[t] += c.value[t];
            var[t] += c.uncertainty[t];
        }
    }
    let dists = point
        .iter()
        .zip(&var)
        .map(|(&m, &v)| GaussianMixture1D::gaussian(m, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((dists, point))
}

fn diffs(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `λ_smooth ‖∇²x‖² + λ_persist ‖∇x‖²`; the second-difference term needs
/// at least three points.
pub fn reg_trend(x: &[f64], w: &RegWeights) -> f64 {
    let d = diffs(x);
    w.smooth * sq_norm(&diffs(&d)) + w.persist * sq_norm(&d)
}

/// `λ_period Σ_t (x_t - x_{t-p})² + λ_smooth ‖∇x‖²`.
pub fn reg_seasonal(x: &[f64], w: &RegWeights) -> f64 {
    let p = w.period_len;
    let per: f64 = (p..x.len()).map(|t| (x[t] - x[t - p]) * (x[t] - x[t - p])).sum();
    w.period * per + w.smooth * sq_norm(&diffs(x))
}

/// `λ_sparse ‖x‖₁ + λ_local ‖∇x‖²`.
pub fn reg_changepoint(x: &[f64], w: &RegWeights) -> f64 {
    w.sparse * x.iter().map(|v| v.abs()).sum::<f64>() + w.local * sq_norm(&diffs(x))
}

/// `λ_hetero ‖x - r‖² + λ_smooth ‖∇x‖²` against per-step residual variance `r`.
pub fn reg_volatility(x: &[f64], residual_var: &[f64], w: &RegWeights) -> Result<f64> {
    if x.len() != residual_var.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: residual_var.len(),
        });
    }
    let gap: f64 = x.iter().zip(residual_var).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(w.hetero * gap + w.smooth * sq_norm(&diffs(x)))
}

/// `x[:, lag..] - x[:, ..H-lag]`, or `None` when `H <= lag`.
fn col_diff(tape: &mut Tape, x: Var, lag: usize) -> Result<Option<Var>> {
    let h = tape.shape(x).1;
    if h <= lag {
        return Ok(None);
    }
    let a = tape.slice(x, lag, h)?;
    let b = tape.slice(x, 0, h - lag)?;
    tape.sub(a, b).map(Some)
}

/// Sum of squares divided by the row count (mean over the batch of each
/// row's squared norm).
fn batch_sq(tape: &mut Tape, x: Option<Var>, weight: f64) -> Option<Var> {
    let x = x?;
    if weight == 0.0 {
        return None;
    }
    let rows = tape.shape(x).0 as f64;
    let s = tape.square(x);
    let s = tape.sum(s);
    Some(tape.scale(s, weight / rows))
}

fn add_terms(tape: &mut Tape, terms: &[Option<Var>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            None => *t,
            Some(a) => tape.add(a, *t)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Batch-mean [`reg_trend`] over the rows of a `B x H` tensor.
pub fn reg_trend_tape(tape: &mut Tape, x: Var, w: &RegWeights) -> Result<Var> {
    let d1 = col_diff(tape, x, 1)?;
    let d2 = match d1 {
        Some(d) => col_diff(tape, d, 1)?,
        None => None,
    };
    let a = batch_sq(tape, d2, w.smooth);
    let b = batch_sq(tape, d1, w.persist);
    add_terms(tape, &[a, b])
}

/// Batch-mean [`reg_seasonal`].
pub fn reg_seasonal_tape(tape: &mut Tape, x: Var, w: &RegWeights) -> Result<Var> {
    let dp = col_diff(tape, x, w.period_len)?;
    let d1 = col_diff(tape, x, 1)?;
    let a = batch_sq(tape, dp, w.period);
    let b = batch_sq(tape, d1, w.smooth);
    add_terms(tape, &[a, b])
}

/// Batch-mean [`reg_changepoint`].
pub fn reg_changepoint_tape(tape: &mut Tape, x: Var, w: &RegWeights) -> Result<Var> {
    let rows = tape.shape(x).0 as f64;
    let l1 = if w.sparse == 0.0 {
        None
    } else {
        let a = tape.abs(x);
        let s = tape.sum(a);
        Some(tape.scale(s, w.sparse / rows))
    };
    let d1 = col_diff(tape, x, 1)?;
    let b = batch_sq(tape, d1, w.local);
    add_terms(tape, &[l1, b])
}

/// Batch-mean [`reg_volatility`] with one residual-variance row shared by
/// the batch.
pub fn reg_volatility_tape(tape: &mut Tape, x: Var, residual_var: &[f64], w: &RegWeights) -> Result<Var> {
    let h = tape.shape(x).1;
    if residual_var.len() != h {
        return Err(Error::LengthMismatch {
            left: h,
            right: residual_var.len(),
        });
    }
    let r = tape.constant(Tensor::row_vector(residual_var.to_vec()));
    let gap = tape.sub(x, r)?;
    let a = batch_sq(tape, Some(gap), w.hetero);
    let d1 = col_diff(tape, x, 1)?;
    let b = batch_sq(tape, d1, w.smooth);
    add_terms(tape, &[a, b])
}

/// Value-level composite: distance plus weighted balance and diversity
/// plus the already-weighted regularizers.
pub fn pattern_loss_total(distance: f64, balance: f64, diversity: f64, regs: &[f64; 4], w: &LossWeights) -> f64 {
    distance + w.balance * balance + w.diversity * diversity + regs.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit() -> RegWeights {
        RegWeights {
            smooth: 1.0,
            persist: 1.0,
            period: 1.0,
            sparse: 1.0,
            local: 1.0,
            hetero: 1.0,
            period_len: 2,
        }
    }

    #[test]
    fn regularizer_hand_values() {
        let w = RegWeights { persist: 0.0, ..unit() };
        assert_eq!(reg_trend(&[0.0, 1.0, 0.0], &w), 4.0);
        assert_eq!(reg_trend(&[3.0; 5], &unit()), 0.0);
        let ramp = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(reg_trend(&ramp, &RegWeights { persist: 0.0, ..unit() }), 0.0);
        assert!(reg_trend(&ramp, &unit()) > 0.0);
        let w = RegWeights { smooth: 0.0, ..unit() };
        assert_eq!(reg_seasonal(&[1.0, -1.0, 1.0, -1.0, 1.0], &w), 0.0);
        assert_eq!(reg_changepoint(&[0.0, 0.0, 1.0, 0.0], &unit()), 1.0 + 2.0);
        let r = [0.5, 0.5, 0.5];
        assert_eq!(reg_volatility(&[1.5, 1.5, 1.5], &r, &unit()).unwrap(), 3.0);
        assert!(reg_volatility(&[1.0], &r, &unit()).is_err());
    }

    #[test]
    fn tape_regularizers_match_values() {
        let rows = [vec![0.3, -1.2, 0.8, 2.0, 0.1], vec![1.0, 0.0, -0.4, 0.4, 0.9]];
        let w = RegWeights {
            smooth: 0.3,
            persist: 0.7,
            period: 1.1,
            sparse: 0.2,
            local: 0.5,
            hetero: 0.9,
            period_len: 2,
        };
        let resid = [0.1, 0.2, 0.3, 0.4, 0.5];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(2, 5, rows.concat()).unwrap());
        let mean = |f: &dyn Fn(&[f64]) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / 2.0;
        let cases = [
            (reg_trend_tape(&mut tape, x, &w).unwrap(), mean(&|r| reg_trend(r, &w))),
            (reg_seasonal_tape(&mut tape, x, &w).unwrap(), mean(&|r| reg_seasonal(r, &w))),
            (reg_changepoint_tape(&mut tape, x, &w).unwrap(), mean(&|r| reg_changepoint(r, &w))),
            (
                reg_volatility_tape(&mut tape, x, &resid, &w).unwrap(),
                mean(&|r| reg_volatility(r, &resid, &w).unwrap()),
            ),
        ];
        for (v, want) in cases {
            assert!((tape.value(v).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn short_horizons_drop_terms() {
        let w = unit();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0, 3.0]));
        let t = reg_trend_tape(&mut tape, x, &w).unwrap();
        assert_eq!(tape.value(t).item(), 4.0);
        let w = RegWeights { period_len: 5, ..w };
        let s = reg_seasonal_tape(&mut tape, x, &w).unwrap();
        assert_eq!(tape.value(s).item(), 4.0);
    }

    #[test]
    fn additive_rules() {
        let c = |kind, v: f64, u: f64| ComponentOutput {
            kind,
            value: vec![v],
            uncertainty: vec![u],
            gate: vec![1.0],
        };
        let comps: Vec<_> = ComponentKind::ALL
            .iter()
            .zip([1.0, 2.0, 3.0, 4.0])
            .map(|(&k, v)| c(k, v, 1.0))
            .collect();
        let (d, p) = additive_combine(&comps).unwrap();
        assert_eq!(p, vec![10.0]);
        assert_eq!(d[0].variance(), 4.0);
        assert!(additive_combine(&comps[..3]).is_err());
    }

    #[test]
    fn forward_is_additive() {
        let cfg = PatternConfig {
            experts: ExpertConfig {
                n_experts: 2,
                hidden_dim: 3,
                n_layers: 1,
                window: 6,
                horizon: 4,
                head_hidden: 3,
                gate_hidden: 3,
                ..ExpertConfig::default()
            },
            regs: RegWeights {
                period_len: 3,
                ..RegWeights::default()
            },
            center_seasonal: true,
        };
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, &[]);
        let m = PatternModel::new(cfg, &mut store, &mut r).unwrap();
        let x = Tensor::new(2, 6, (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let comps = m.components_for(&store, &x).unwrap();
        let preds = m.predict(&store, &x).unwrap();
        for (c, p) in comps.iter().zip(&preds) {
            let seasonal = &c[1].value;
            assert!(seasonal[..3].iter().sum::<f64>().abs() < 1e-12);
            for t in 0..4 {
                let s: f64 = c.iter().map(|k| k.value[t]).sum();
                assert!((s - p[t].mean()).abs() < 1e-12);
                assert!(c.iter().all(|k| k.uncertainty[t] > 0.0));
            }
        }
    }
}
