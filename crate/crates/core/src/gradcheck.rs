//! Finite-difference checks of tape gradients.
//!
//! [`check`] compares reverse-mode gradients with central differences.
//! [`cases`] lists one scalar function per differentiable operation and per
//! loss term, each with a generator for seeded random inputs.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::enhance::Bins;
use crate::moe::{
    balance_loss, diversity_loss, kl_mixture_loss, mmd_mixture_loss, weighted_sum, BatchTargets, ExpertConfig,
    LossWeights, MoeModel, OutputMode,
};
use crate::nn::ParamStore;
use crate::pattern::{reg_changepoint_tape, reg_seasonal_tape, reg_trend_tape, reg_volatility_tape, RegWeights};
use crate::rng::{self, Rng};
use crate::Result;

/// Step for central differences.
pub const STEP: f64 = 1e-6;

/// Worst relative error over the inputs, each measured as
/// `|g - n| / max(|g|, |n|, floor)` in the Euclidean norm, where `g` is the
/// tape gradient and `n` the numerical one.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = f(&mut t, &vs)?;
    let grads = t.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vs[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows, x.cols));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for k in 0..x.len() {
            let orig = x.data[k];
            xs[i].data[k] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data[k] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data[k] = orig;
            let num = (up - down) / (2.0 * STEP);
            let g = analytic.data[k];
            diff2 += (g - num) * (g - num);
            a2 += g * g;
            n2 += num * num;
        }
        let scale = Float::sqrt(a2).max(Float::sqrt(n2)).max(1e-6);
        worst = worst.max(Float::sqrt(diff2) / scale);
    }
    Ok(worst)
}

/// Value domain for generated inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    /// Uniform on `[-2, 2]`, kept at least `0.05` away from zero.
    Signed,
    /// Uniform on `[0.2, 2]`.
    Positive,
}

fn draw(r: &mut Rng, d: Domain) -> f64 {
    match d {
        Domain::Signed => {
            let m = 0.05 + 1.95 * r.random::<f64>();
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        }
        Domain::Positive => 0.2 + 1.8 * r.random::<f64>(),
    }
}

/// Random tensor of the given shape and domain.
pub fn random_tensor(r: &mut Rng, rows: usize, cols: usize, d: Domain) -> Tensor {
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| draw(r, d)).collect(),
    }
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One gradient-check target.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: &'static str,
    /// `(rows, cols, domain)` of each input.
    pub inputs: Vec<(usize, usize, Domain)>,
    pub build: Build,
}

impl Case {
    pub fn sample(&self, seed: u64) -> Vec<Tensor> {
        let mut r = rng::stream(seed, &[0x6772_6164]);
        self.inputs
            .iter()
            .map(|&(rows, cols, d)| random_tensor(&mut r, rows, cols, d))
            .collect()
    }

    pub fn run(&self, seed: u64) -> Result<f64> {
        check(&self.sample(seed), self.build)
    }
}

/// Fixed weights that reduce a non-scalar output to a scalar.
fn project(t: &mut Tape, v: Var) -> Result<Var> {
    let (rows, cols) = t.shape(v);
    let data = (0..rows * cols)
        .map(|k| 0.3 + Float::sin(1.7 * k as f64 + 0.4))
        .collect();
    let w = t.constant(Tensor { rows, cols, data });
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn case(name: &'static str, inputs: &[(usize, usize, Domain)], build: Build) -> Case {
    Case {
        name,
        inputs: inputs.to_vec(),
        build,
    }
}

fn test_regs() -> RegWeights {
    RegWeights {
        smooth: 0.3,
        persist: 0.2,
        period: 0.4,
        sparse: 0.5,
        local: 0.1,
        hetero: 0.6,
        period_len: 3,
    }
}

/// Every differentiable operation and loss term.
pub fn cases() -> Vec<Case> {
    use Domain::{Positive as P, Signed as S};
    vec![
        case("exp", &[(3, 4, S)], |t, v| {
            let y = t.exp(v[0]);
            project(t, y)
        }),
        case("log", &[(3, 4, P)], |t, v| {
            let y = t.log(v[0]);
            project(t, y)
        }),
        case("tanh", &[(3, 4, S)], |t, v| {
            let y = t.tanh(v[0]);
            project(t, y)
        }),
        case("sigmoid", &[(3, 4, S)], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        }),
        case("square", &[(3, 4, S)], |t, v| {
            let y = t.square(v[0]);
            project(t, y)
        }),
        case("sqrt", &[(3, 4, P)], |t, v| {
            let y = t.sqrt(v[0]);
            project(t, y)
        }),
        case("abs", &[(3, 4, S)], |t, v| {
            let y = t.abs(v[0]);
            project(t, y)
        }),
        case("neg", &[(3, 4, S)], |t, v| {
            let y = t.neg(v[0]);
            project(t, y)
        }),
        case("scale", &[(3, 4, S)], |t, v| {
            let y = t.scale(v[0], -1.3);
            project(t, y)
        }),
        case("div_scalar", &[(3, 4, S)], |t, v| {
            let y = t.div_scalar(v[0], 0.7);
            project(t, y)
        }),
        case("add_scalar", &[(3, 4, S)], |t, v| {
            let y = t.add_scalar(v[0], 2.5);
            project(t, y)
        }),
        case("powf", &[(3, 4, P)], |t, v| {
            let y = t.powf(v[0], -0.5);
            project(t, y)
        }),
        case("clamp", &[(3, 4, S)], |t, v| {
            // Bounds chosen so no input lands within a step of a bound.
            let y = t.clamp(v[0], -1.0125, 1.0125);
            project(t, y)
        }),
        case("add", &[(3, 4, S), (3, 4, S)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        case("add_broadcast_row", &[(3, 4, S), (1, 4, S)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        case("sub", &[(3, 4, S), (3, 1, S)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        case("mul", &[(3, 4, S), (3, 4, S)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        }),
        case("mul_broadcast_scalar", &[(3, 4, S), (1, 1, S)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        }),
        case("div", &[(3, 4, S), (3, 4, P)], |t, v| {
            let y = t.div(v[0], v[1])?;
            project(t, y)
        }),
        case("matmul", &[(3, 5, S), (5, 2, S)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
        case("sum", &[(3, 4, S)], |t, v| {
            let y = t.sum(v[0]);
            let y = t.square(y);
            Ok(y)
        }),
        case("mean", &[(3, 4, S)], |t, v| {
            let y = t.mean(v[0]);
            Ok(t.square(y))
        }),
        case("variance", &[(3, 4, S)], |t, v| Ok(t.variance(v[0]))),
        case("sum_rows", &[(3, 4, S)], |t, v| {
            let y = t.sum_rows(v[0]);
            project(t, y)
        }),
        case("mean_rows", &[(3, 4, S)], |t, v| {
            let y = t.mean_rows(v[0]);
            project(t, y)
        }),
        case("sum_cols", &[(3, 4, S)], |t, v| {
            let y = t.sum_cols(v[0]);
            project(t, y)
        }),
        case("softmax_with_temperature", &[(3, 4, S)], |t, v| {
            let y = t.softmax_with_temperature(v[0], 1.5)?;
            project(t, y)
        }),
        case("softmax_groups", &[(2, 6, S)], |t, v| {
            let y = t.softmax_groups(v[0], 3, 0.8)?;
            project(t, y)
        }),
        case("concat", &[(3, 2, S), (3, 3, S)], |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]])?;
            project(t, y)
        }),
        case("slice", &[(3, 5, S)], |t, v| {
            let y = t.slice(v[0], 1, 4)?;
            project(t, y)
        }),
        case("lstm_cell", &[(2, 12, S), (2, 6, S)], |t, v| {
            let hc = t.lstm_cell(v[0], Some(v[1]))?;
            project(t, hc)
        }),
        case("lstm_cell_initial", &[(2, 12, S)], |t, v| {
            let hc = t.lstm_cell(v[0], None)?;
            project(t, hc)
        }),
        case("cosine_similarity", &[(1, 5, S), (1, 5, S)], |t, v| t.cosine_similarity(v[0], v[1])),
        case(
            "loss.mmd_mixture",
            &[(3, 3, S), (3, 3, S), (3, 3, S), (3, 3, S), (3, 3, S), (3, 3, P), (3, 3, S)],
            |t, v| {
                // Gate logits, three expert means, three log-variances, then
                // target mean and variance.
                let g = t.softmax_with_temperature(v[0], 1.5)?;
                let cols: Vec<Var> = (0..3).map(|i| t.slice(g, i, i + 1)).collect::<Result<_>>()?;
                let means = [v[1], v[2], v[3]];
                let vars: Vec<Var> = [v[4], v[6], v[1]].iter().map(|&l| t.exp(l)).collect();
                mmd_mixture_loss(t, &cols, &means, &vars, v[3], v[5], 0.8)
            },
        ),
        case("loss.kl_mixture", &[(2, 6, S)], |t, v| {
            let target = Tensor::new(2, 6, vec![0.1, 0.6, 0.3, 0.45, 0.45, 0.1, 0.0, 0.3, 0.7, 0.2, 0.2, 0.6])?;
            let q = t.softmax_groups(v[0], 3, 1.0)?;
            kl_mixture_loss(t, &target, q, 3)
        }),
        case("loss.kl_weighted_mixture", &[(2, 2, S), (2, 6, S), (2, 6, S)], |t, v| {
            let target = Tensor::new(2, 6, vec![0.2, 0.5, 0.3, 0.0, 0.1, 0.9, 1.0, 0.0, 0.0, 0.25, 0.25, 0.5])?;
            let g = t.softmax_with_temperature(v[0], 1.0)?;
            let cols: Vec<Var> = (0..2).map(|i| t.slice(g, i, i + 1)).collect::<Result<_>>()?;
            let a = t.softmax_groups(v[1], 3, 1.0)?;
            let b = t.softmax_groups(v[2], 3, 1.0)?;
            let mix = weighted_sum(t, &cols, &[a, b])?;
            kl_mixture_loss(t, &target, mix, 3)
        }),
        case("loss.balance", &[(5, 4, S)], |t, v| {
            let g = t.softmax_with_temperature(v[0], 1.5)?;
            Ok(balance_loss(t, g))
        }),
        case("loss.diversity", &[(3, 4, S), (3, 4, S), (3, 4, S)], diversity_loss),
        case("loss.reg_trend", &[(3, 8, S)], |t, v| reg_trend_tape(t, v[0], &test_regs())),
        case("loss.reg_seasonal", &[(3, 8, S)], |t, v| reg_seasonal_tape(t, v[0], &test_regs())),
        case("loss.reg_changepoint", &[(3, 8, S)], |t, v| reg_changepoint_tape(t, v[0], &test_regs())),
        case("loss.reg_volatility", &[(3, 8, P)], |t, v| {
            let resid = [0.5, 1.2, 0.1, 0.9, 0.4, 1.7, 0.3, 0.8];
            reg_volatility_tape(t, v[0], &resid, &test_regs())
        }),
        case("loss.moe_continuous", &[(3, 4, S)], |t, v| moe_loss(t, v[0], OutputMode::Continuous)),
        case("loss.moe_discrete", &[(3, 4, S)], |t, v| {
            let bins = Bins {
                low: -3.0,
                high: 3.0,
                count: 4,
            };
            moe_loss(t, v[0], OutputMode::Discrete { bins })
        }),
    ]
}

/// Full multi-expert composite loss with gradients taken with respect to
/// a `3 x 4` input window, on a tiny model with fixed parameters, targets
/// and gate noise. The gradient reaches every layer of the model.
fn moe_loss(t: &mut Tape, x: Var, mode: OutputMode) -> Result<Var> {
    let cfg = ExpertConfig {
        n_experts: 2,
        hidden_dim: 3,
        n_layers: 2,
        window: 4,
        horizon: 2,
        input_dim: 1,
        temperature: 1.5,
        noise_std: 0.1,
        head_hidden: 4,
        gate_hidden: 3,
        mode,
    };
    let mut store = ParamStore::new();
    let model = MoeModel::new(cfg, &mut store, &mut rng::stream(11, &[]))?;
    let bound = store.bind(t);
    let mean = Tensor::new(3, 2, vec![0.3, -0.8, 1.1, 0.4, -0.2, 0.9])?;
    let var = Tensor::new(3, 2, vec![0.5, 0.2, 1.3, 0.7, 0.4, 0.9])?;
    let probs = match mode {
        OutputMode::Continuous => None,
        OutputMode::Discrete { bins } => {
            let rows: Vec<f64> = mean
                .data
                .iter()
                .zip(&var.data)
                .flat_map(|(&m, &s)| crate::enhance::gaussian_bin_masses(m, s, &bins))
                .collect();
            Some(Tensor::new(mean.rows, mean.cols * bins.count, rows)?)
        }
    };
    let targets = BatchTargets { mean, var, probs };
    let noise = crate::moe::gate_noise(5, 0, 0, &[0, 1, 2], 2, 0.1);
    let out = model.loss(t, &bound, x, &targets, Some(&noise), &LossWeights::default())?;
    Ok(out.total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        for c in cases() {
            for seed in 0..3 {
                let err = c.run(seed).unwrap();
                assert!(err < 1e-4, "{} seed {seed}: relative error {err:e}", c.name);
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Reading a leaf's value back as a constant hides it from the tape.
        let x = [Tensor::row_vector(vec![0.5, 1.5])];
        let err = check(&x, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let y = t.mul(c, v[0])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
