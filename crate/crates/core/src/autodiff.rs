//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! row-major `rows x cols` buffers of `f64`; vectors are `1 x n` and scalars
//! `1 x 1`. Binary elementwise operations broadcast their right operand when
//! its rows or columns are 1.
//!
//! ```
//! use ldlmoe_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data[0], 6.0);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Added to vector norms in [`Tape::cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Only meaningful for `1 x 1` tensors.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    Abs,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SumRows(Var),
    SumCols(Var),
    Softmax { input: Var, group: usize, temperature: f64 },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Cosine(Var, Var),
    /// `acts` caches the `[i | f | g | o]` activations.
    LstmCell { z: Var, prev: Option<Var>, acts: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcastable(lhs: (usize, usize), rhs: (usize, usize)) -> bool {
    (rhs.0 == lhs.0 || rhs.0 == 1) && (rhs.1 == lhs.1 || rhs.1 == 1)
}

/// `out[i][j] += sum_k a[i][k] b[k][j]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + Float::exp(-x))
    } else {
        let e = Float::exp(x);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient (data, targets, noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let f: fn(f64, Unary) -> f64 = |v, k| match k {
            Unary::Exp => Float::exp(v),
            Unary::Log => Float::ln(v),
            Unary::Tanh => Float::tanh(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Square => v * v,
            Unary::Sqrt => Float::sqrt(v),
            Unary::Abs => Float::abs(v),
            Unary::Neg => -v,
            Unary::Scale(s) => v * s,
            Unary::AddScalar(s) => v + s,
            Unary::Powf(p) => Float::powf(v, p),
            Unary::Clamp(lo, hi) => v.max(lo).min(hi),
        };
        let data = x.data.iter().map(|&v| f(v, kind)).collect();
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        let ng = self.ng(a);
        self.push(value, Op::Unary(kind, a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), a)
    }
    pub fn div_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::Scale(1.0 / s), a)
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::AddScalar(s), a)
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(Unary::Powf(p), a)
    }
    /// Gradient is passed through only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcastable(x.shape(), y.shape()) {
            return Err(Error::Shape {
                op: name,
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let (r, c) = x.shape();
        let f = |u: f64, v: f64| match kind {
            Binary::Add => u + v,
            Binary::Sub => u - v,
            Binary::Mul => u * v,
            Binary::Div => u / v,
        };
        let data = if y.shape() == x.shape() {
            x.data.iter().zip(&y.data).map(|(&u, &v)| f(u, v)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let yi = if y.rows == 1 { 0 } else { i };
                for j in 0..c {
                    let yj = if y.cols == 1 { 0 } else { j };
                    out.push(f(x.data[i * c + j], y.data[yi * y.cols + yj]));
                }
            }
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                rows: r,
                cols: c,
                data,
            },
            Op::Binary(kind, a, b),
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.cols != y.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let (m, k, n) = (x.rows, x.cols, y.cols);
        let mut out = vec![0.0; m * n];
        matmul_into(&x.data, &y.data, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                rows: m,
                cols: n,
                data: out,
            },
            Op::MatMul(a, b),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.len() as f64;
        let m = x.data.iter().sum::<f64>() / n;
        let v = x.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Variance(a), ng)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::row_vector(out), Op::SumRows(a), ng)
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let out: Vec<f64> = (0..x.rows).map(|i| x.row(i).iter().sum()).collect();
        let ng = self.ng(a);
        let rows = out.len();
        self.push(
            Tensor {
                rows,
                cols: 1,
                data: out,
            },
            Op::SumCols(a),
            ng,
        )
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_with_temperature(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let cols = self.shape(a).1;
        self.softmax_groups(a, cols, temperature)
    }

    /// Softmax over each consecutive run of `group` columns in every row.
    pub fn softmax_groups(&mut self, a: Var, group: usize, temperature: f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if group == 0 || !x.cols.is_multiple_of(group) {
            return Err(Error::Shape {
                op: "softmax",
                lhs: x.shape(),
                rhs: (1, group),
            });
        }
        if !(temperature > 0.0) {
            return Err(Error::Config("softmax temperature must be positive".into()));
        }
        let mut out = x.data.clone();
        for chunk in out.chunks_mut(group) {
            let mx = chunk.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in chunk.iter_mut() {
                *v = Float::exp((*v - mx) / temperature);
                s += *v;
            }
            for v in chunk.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: out,
        };
        let ng = self.ng(a);
        Ok(self.push(
            value,
            Op::Softmax {
                input: a,
                group,
                temperature,
            },
            ng,
        ))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Config("concat of nothing".into())),
        };
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if start >= end || end > x.cols {
            return Err(Error::Shape {
                op: "slice",
                lhs: x.shape(),
                rhs: (start, end),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(x.rows * w);
        for i in 0..x.rows {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let value = Tensor {
            rows: x.rows,
            cols: w,
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(value, Op::Slice { input: a, start }, ng))
    }

    /// One LSTM cell update from pre-activations `z = [i | f | g | o]`
    /// (`B x 4h`) and the previous `[h | c]` state (`B x 2h`, zero when
    /// `None`). Returns the new `[h | c]`.
    pub fn lstm_cell(&mut self, z: Var, prev: Option<Var>) -> Result<Var> {
        let zt = &self.nodes[z.0].value;
        let (b, w) = zt.shape();
        if w % 4 != 0 {
            return Err(Error::Shape {
                op: "lstm_cell",
                lhs: (b, w),
                rhs: (b, 4),
            });
        }
        let h = w / 4;
        if let Some(p) = prev {
            if self.shape(p) != (b, 2 * h) {
                return Err(Error::Shape {
                    op: "lstm_cell",
                    lhs: (b, w),
                    rhs: self.shape(p),
                });
            }
        }
        let mut data = vec![0.0; b * 2 * h];
        let mut acts = vec![0.0; b * w];
        for r in 0..b {
            let zr = zt.row(r);
            let ar = &mut acts[r * w..(r + 1) * w];
            for k in 0..h {
                let i = sigmoid(zr[k]);
                let f = sigmoid(zr[h + k]);
                let g = Float::tanh(zr[2 * h + k]);
                let o = sigmoid(zr[3 * h + k]);
                let cp = match prev {
                    Some(p) => self.nodes[p.0].value.data[r * 2 * h + h + k],
                    None => 0.0,
                };
                let c = f * cp + i * g;
                data[r * 2 * h + k] = o * Float::tanh(c);
                data[r * 2 * h + h + k] = c;
                ar[k] = i;
                ar[h + k] = f;
                ar[2 * h + k] = g;
                ar[3 * h + k] = o;
            }
        }
        let ng = self.ng(z) || prev.is_some_and(|p| self.ng(p));
        Ok(self.push(
            Tensor {
                rows: b,
                cols: 2 * h,
                data,
            },
            Op::LstmCell { z, prev, acts },
            ng,
        ))
    }

    /// `a . b / ((|a| + eps)(|b| + eps))` over all elements.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.len() != y.len() {
            return Err(Error::Shape {
                op: "cosine_similarity",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let dot: f64 = x.data.iter().zip(&y.data).map(|(u, v)| u * v).sum();
        let na = Float::sqrt(x.data.iter().map(|u| u * u).sum::<f64>());
        let nb = Float::sqrt(y.data.iter().map(|u| u * u).sum::<f64>());
        let c = dot / ((na + COSINE_EPS) * (nb + COSINE_EPS));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), ng))
    }

    /// Gradients of the scalar `loss` with respect to every leaf. The tape can
    /// only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            // Only leaves keep their gradients.
            if let Some(g) = grads[idx].take() {
                self.pullback(idx, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn pullback(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                if !self.ng(*a) {
                    return;
                }
                let x = &self.nodes[a.0].value;
                let data = x
                    .data
                    .iter()
                    .zip(&out.data)
                    .zip(&g.data)
                    .map(|((&xv, &yv), &gv)| {
                        gv * match *kind {
                            Unary::Exp => yv,
                            Unary::Log => 1.0 / xv,
                            Unary::Tanh => 1.0 - yv * yv,
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Square => 2.0 * xv,
                            Unary::Sqrt => 0.5 / yv,
                            Unary::Abs => {
                                if xv > 0.0 {
                                    1.0
                                } else if xv < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Neg => -1.0,
                            Unary::Scale(s) => s,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Powf(p) => p * Float::powf(xv, p - 1.0),
                            Unary::Clamp(lo, hi) => {
                                if xv >= lo && xv <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data,
                    },
                );
            }
            Op::Binary(kind, a, b) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[b.0].value;
                let (r, c) = x.shape();
                let same = x.shape() == y.shape();
                let yat = |i: usize, j: usize| {
                    if same {
                        y.data[i * c + j]
                    } else {
                        y.data[(if y.rows == 1 { 0 } else { i }) * y.cols + if y.cols == 1 { 0 } else { j }]
                    }
                };
                if self.ng(*a) {
                    let mut ga = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.data[i * c + j];
                            ga.push(match kind {
                                Binary::Add | Binary::Sub => gv,
                                Binary::Mul => gv * yat(i, j),
                                Binary::Div => gv / yat(i, j),
                            });
                        }
                    }
                    self.accumulate(grads, *a, Tensor { rows: r, cols: c, data: ga });
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; y.len()];
                    for i in 0..r {
                        let yi = if y.rows == 1 { 0 } else { i };
                        for j in 0..c {
                            let yj = if y.cols == 1 { 0 } else { j };
                            let gv = g.data[i * c + j];
                            let xv = x.data[i * c + j];
                            let yv = y.data[yi * y.cols + yj];
                            gb[yi * y.cols + yj] += match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * xv,
                                Binary::Div => -gv * xv / (yv * yv),
                            };
                        }
                    }
                    self.accumulate(
                        grads,
                        *b,
                        Tensor {
                            rows: y.rows,
                            cols: y.cols,
                            data: gb,
                        },
                    );
                }
            }
            Op::MatMul(a, b) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[b.0].value;
                let (m, k, n) = (x.rows, x.cols, y.cols);
                if self.ng(*a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &y.data[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor { rows: m, cols: k, data: ga });
                }
                if self.ng(*b) {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = x.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor { rows: k, cols: n, data: gb });
                }
            }
            Op::Sum(a) => {
                let x = &self.nodes[a.0].value;
                self.accumulate(grads, *a, Tensor::filled(x.rows, x.cols, g.data[0]));
            }
            Op::Mean(a) => {
                let x = &self.nodes[a.0].value;
                let v = g.data[0] / x.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(x.rows, x.cols, v));
            }
            Op::Variance(a) => {
                let x = &self.nodes[a.0].value;
                let n = x.len() as f64;
                let m = x.data.iter().sum::<f64>() / n;
                let data = x.data.iter().map(|v| g.data[0] * 2.0 * (v - m) / n).collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data,
                    },
                );
            }
            Op::SumRows(a) => {
                let x = &self.nodes[a.0].value;
                let mut data = Vec::with_capacity(x.len());
                for _ in 0..x.rows {
                    data.extend_from_slice(&g.data);
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data,
                    },
                );
            }
            Op::SumCols(a) => {
                let x = &self.nodes[a.0].value;
                let mut data = Vec::with_capacity(x.len());
                for i in 0..x.rows {
                    data.extend(core::iter::repeat_n(g.data[i], x.cols));
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data,
                    },
                );
            }
            Op::Softmax {
                input,
                group,
                temperature,
            } => {
                // dx = (1 / T) y * (g - <g, y>) per group
                let mut data = Vec::with_capacity(out.len());
                for (yc, gc) in out.data.chunks(*group).zip(g.data.chunks(*group)) {
                    let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    data.extend(yc.iter().zip(gc).map(|(yv, gv)| yv * (gv - dot) / temperature));
                }
                self.accumulate(
                    grads,
                    *input,
                    Tensor {
                        rows: out.rows,
                        cols: out.cols,
                        data,
                    },
                );
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(out.rows * w);
                        for i in 0..out.rows {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(
                            grads,
                            p,
                            Tensor {
                                rows: out.rows,
                                cols: w,
                                data,
                            },
                        );
                    }
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                let x = &self.nodes[input.0].value;
                let mut data = vec![0.0; x.len()];
                for i in 0..x.rows {
                    data[i * x.cols + start..i * x.cols + start + out.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(
                    grads,
                    *input,
                    Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data,
                    },
                );
            }
            Op::Cosine(a, b) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[b.0].value;
                let na = Float::sqrt(x.data.iter().map(|u| u * u).sum::<f64>());
                let nb = Float::sqrt(y.data.iter().map(|u| u * u).sum::<f64>());
                let denom = (na + COSINE_EPS) * (nb + COSINE_EPS);
                let c = out.data[0];
                let gv = g.data[0];
                // d/da [a.b / ((|a| + e)(|b| + e))] = b / D - c a / (|a| (|a| + e))
                let side = |u: &Tensor, v: &Tensor, nu: f64| -> Tensor {
                    let k = if nu > 0.0 { c / (nu * (nu + COSINE_EPS)) } else { 0.0 };
                    Tensor {
                        rows: u.rows,
                        cols: u.cols,
                        data: u
                            .data
                            .iter()
                            .zip(&v.data)
                            .map(|(uv, vv)| gv * (vv / denom - k * uv))
                            .collect(),
                    }
                };
                if self.ng(*a) {
                    let d = side(x, y, na);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = side(y, x, nb);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::LstmCell { z, prev, acts } => {
                let (b, w) = self.shape(*z);
                let h = w / 4;
                let mut gz = vec![0.0; b * w];
                let mut gp = vec![0.0; b * 2 * h];
                for r in 0..b {
                    let ar = &acts[r * w..(r + 1) * w];
                    for k in 0..h {
                        let (i, f, gg, o) = (ar[k], ar[h + k], ar[2 * h + k], ar[3 * h + k]);
                        let cp = match prev {
                            Some(p) => self.nodes[p.0].value.data[r * 2 * h + h + k],
                            None => 0.0,
                        };
                        let tc = Float::tanh(out.data[r * 2 * h + h + k]);
                        let gh = g.data[r * 2 * h + k];
                        let dc = g.data[r * 2 * h + h + k] + gh * o * (1.0 - tc * tc);
                        gz[r * w + k] = dc * gg * i * (1.0 - i);
                        gz[r * w + h + k] = dc * cp * f * (1.0 - f);
                        gz[r * w + 2 * h + k] = dc * i * (1.0 - gg * gg);
                        gz[r * w + 3 * h + k] = gh * tc * o * (1.0 - o);
                        gp[r * 2 * h + h + k] = dc * f;
                    }
                }
                self.accumulate(grads, *z, Tensor { rows: b, cols: w, data: gz });
                if let Some(p) = prev {
                    self.accumulate(
                        grads,
                        *p,
                        Tensor {
                            rows: b,
                            cols: 2 * h,
                            data: gp,
                        },
                    );
                }
            }
        }
    }
}
