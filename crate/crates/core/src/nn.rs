//! Parameter storage and the layers the models are built from.
//!
//! Parameters live in a [`ParamStore`] outside any tape. Each forward pass
//! binds them onto a fresh tape as leaves ([`ParamStore::bind`]) and reads
//! their gradients back by [`ParamId`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

/// Parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
            .collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Gradients in parameter order; parameters the loss did not touch get zeros.
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.rows, p.value.cols))
            })
            .collect()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in &self.params {
            p.name.bytes().for_each(&mut eat);
            for d in [p.value.rows, p.value.cols] {
                (d as u64).to_le_bytes().into_iter().for_each(&mut eat);
            }
            for v in &p.value.data {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::LengthMismatch {
                left: self.params.len(),
                right: other.params.len(),
            });
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::Shape {
                    op: "copy_from",
                    lhs: a.value.shape(),
                    rhs: b.value.shape(),
                });
            }
            a.value.data.copy_from_slice(&b.value.data);
        }
        Ok(())
    }
}

/// Dense affine layer `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = Float::sqrt(6.0 / (inputs + outputs) as f64);
        let w = store.uniform(format!("{name}.w"), inputs, outputs, bound, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, outputs));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p.var(self.w))?;
        tape.add(xw, p.var(self.b))
    }
}

/// Stack of linear layers with `tanh` between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width from input to output.
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }
}

/// One direction of one LSTM layer. Gate order in the fused weights is
/// input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / Float::sqrt(hidden as f64);
        let wx = store.uniform(format!("{name}.wx"), inputs, 4 * hidden, bound, rng);
        let wh = store.uniform(format!("{name}.wh"), hidden, 4 * hidden, bound, rng);
        let mut bias = Tensor::zeros(1, 4 * hidden);
        // Forget gate starts open.
        for v in &mut bias.data[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias);
        Self { wx, wh, b, hidden }
    }

    /// One step. `state` is the previous `[h | c]` (`None` for zeros);
    /// returns the new hidden state and the new `[h | c]`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, state: Option<Var>) -> Result<(Var, Var)> {
        let mut z = tape.matmul(x, p.var(self.wx))?;
        if let Some(s) = state {
            let hp = tape.slice(s, 0, self.hidden)?;
            let zh = tape.matmul(hp, p.var(self.wh))?;
            z = tape.add(z, zh)?;
        }
        z = tape.add(z, p.var(self.b))?;
        let hc = tape.lstm_cell(z, state)?;
        let h = tape.slice(hc, 0, self.hidden)?;
        Ok((h, hc))
    }
}

/// Stacked bidirectional LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub inputs: usize,
    pub hidden: usize,
}

/// Outputs of a [`BiLstm`] pass.
#[derive(Debug, Clone)]
pub struct BiLstmOutput {
    /// `batch x 2 hidden` per time step from the top layer.
    pub steps: Vec<Var>,
    /// Final forward state joined with the final backward state.
    pub last: Var,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Self {
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { inputs } else { 2 * hidden };
            let f = LstmCell::new(store, &format!("{name}.l{l}.fwd"), inp, hidden, rng);
            let b = LstmCell::new(store, &format!("{name}.l{l}.bwd"), inp, hidden, rng);
            cells.push((f, b));
        }
        Self {
            layers: cells,
            inputs,
            hidden,
        }
    }

    /// Runs over `steps`, each `batch x inputs`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, steps: &[Var]) -> Result<BiLstmOutput> {
        if steps.is_empty() {
            return Err(Error::Config("LSTM needs at least one time step".into()));
        }
        let n = steps.len();
        let mut xs = steps.to_vec();
        let mut last = None;
        for (fwd, bwd) in &self.layers {
            let mut hf = Vec::with_capacity(n);
            let mut state = None;
            for &x in &xs {
                let (h, s) = fwd.step(tape, p, x, state)?;
                hf.push(h);
                state = Some(s);
            }
            let mut hb = alloc::vec![hf[0]; n];
            let mut state = None;
            for t in (0..n).rev() {
                let (h, s) = bwd.step(tape, p, xs[t], state)?;
                hb[t] = h;
                state = Some(s);
            }
            let mut out = Vec::with_capacity(n);
            for t in 0..n {
                out.push(tape.concat(&[hf[t], hb[t]])?);
            }
            last = Some(tape.concat(&[hf[n - 1], hb[0]])?);
            xs = out;
        }
        Ok(BiLstmOutput {
            steps: xs,
            last: last.expect("at least one layer"),
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Splits a `batch x (steps * dim)` window tensor into per-step columns.
pub fn split_steps(tape: &mut Tape, x: Var, steps: usize, dim: usize) -> Result<Vec<Var>> {
    let (_, cols) = tape.shape(x);
    if cols != steps * dim {
        return Err(Error::Shape {
            op: "split_steps",
            lhs: tape.shape(x),
            rhs: (steps, dim),
        });
    }
    (0..steps).map(|t| tape.slice(x, t * dim, (t + 1) * dim)).collect()
}
