//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] lives for one training step. Every operation appends a node
//! holding its forward value and enough saved state to run its vector-Jacobian
//! product; [`Graph::backward`] replays the tape once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParameterStore};
use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Result, VqdError};

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMean(Var),
    SmoothL1(Var, Var),
    GaussianKl(Var, Var),
    Focal { logits: Var, targets: Vec<f64>, params: FocalParams },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> VqdError {
    VqdError::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(1024), params: HashMap::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(dim_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(dim_err("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("div", a, b, |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("maximum", a, b, f64::max)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Maximum(a, b), ng))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("minimum", a, b, f64::min)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Minimum(a, b), ng))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(row).len() != c {
            return Err(dim_err("add_row", self.value(x).shape(), self.value(row).shape()));
        }
        let b = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (d, bv) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *d += bv;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v + s);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.map(x, softplus);
        let ng = self.ng(x);
        self.push(t, Op::Softplus(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        let ng = self.ng(x);
        self.push(t, Op::Exp(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::abs);
        let ng = self.ng(x);
        self.push(t, Op::Abs(x), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.map(x, |v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(t, Op::Clamp(x, lo, hi), ng)
    }

    /// Row-wise softmax. With a mask (`allow[r * c + j]`), disallowed entries
    /// are exactly zero and the max subtraction only sees allowed entries.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Arc<Vec<bool>>>) -> Result<Var> {
        let t = softmax_rows_raw(self.value(x), mask.map(|m| m.as_slice()))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(dim_err("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(dim_err("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            return Err(dim_err("concat_cols", self.value(parts[0]).shape(), self.value(bad).shape()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > r {
            return Err(VqdError::Dimension(format!("slice_rows {start}+{len} of {r} rows")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > c {
            return Err(VqdError::Dimension(format!("slice_cols {start}+{len} of {c} cols")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(x, start), ng))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(VqdError::Dimension(format!("gather_rows index {bad} of {r} rows")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(idx.len(), c, data)?, Op::GatherRows(x, idx.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean over all elements; zero for an empty tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = if t.is_empty() { 0.0 } else { t.data().iter().sum::<f64>() / t.len() as f64 };
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// `r x c -> r x 1` row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let data = (0..r).map(|i| self.value(x).data()[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, 1, data).unwrap(), Op::RowSum(x), ng)
    }

    pub fn row_mean(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let data = (0..r)
            .map(|i| self.value(x).data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, 1, data).unwrap(), Op::RowMean(x), ng)
    }

    /// Elementwise smooth-L1 (`0.5 d^2` for `|d| < 1`, else `|d| - 0.5`).
    pub fn smooth_l1_elem(&mut self, pred: Var, target: Var) -> Result<Var> {
        let t = self.zip("smooth_l1", pred, target, |p, q| smooth_l1_scalar(p - q))?;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(t, Op::SmoothL1(pred, target), ng))
    }

    /// Mean smooth-L1 over all elements.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(dim_err("smooth_l1", self.value(pred).shape(), self.value(target).shape()));
        }
        let e = self.smooth_l1_elem(pred, target)?;
        Ok(self.mean(e))
    }

    /// KL(N(mu, diag(exp(log_var))) || N(0, I)) summed over the last axis and
    /// averaged over rows. Zero rows give zero.
    pub fn gaussian_kl(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        let (tm, tv) = (self.value(mu), self.value(log_var));
        if tm.shape() != tv.shape() {
            return Err(dim_err("gaussian_kl", tm.shape(), tv.shape()));
        }
        if !tm.is_finite() || !tv.is_finite() {
            return Err(VqdError::NonFinite("gaussian_kl input".into()));
        }
        let rows = tm.rows();
        let total: f64 = tm
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum();
        let kl = if rows == 0 { 0.0 } else { total / rows as f64 };
        let ng = self.ng(mu) || self.ng(log_var);
        Ok(self.push(Tensor::scalar(kl), Op::GaussianKl(mu, log_var), ng))
    }

    /// Sigmoid focal loss summed over all elements. `targets` holds 0/1 labels.
    pub fn focal_loss(&mut self, logits: Var, targets: &Tensor, params: FocalParams) -> Result<Var> {
        let t = self.value(logits);
        if t.dims2() != targets.dims2() {
            return Err(dim_err("focal_loss", t.shape(), targets.shape()));
        }
        let total = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| focal_scalar(x, y, params).0)
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal { logits, targets: targets.data().to_vec(), params },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss. The tape may be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(VqdError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(VqdError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    /// Runs [`Graph::backward`] and adds each parameter leaf's gradient into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                for (acc, gv) in store.grad_mut(id).data_mut().iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let elementwise = |v: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..val(v).len()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).cols();
                if self.ng(a) {
                    acc(a, matmul_bt_raw(g, val(b), m, n, k));
                }
                if self.ng(b) {
                    acc(b, matmul_at_raw(val(a), g, m, k, n));
                }
            }
            &Op::MatMulBt(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).rows();
                if self.ng(a) {
                    acc(a, matmul_raw(g, val(b), m, n, k));
                }
                if self.ng(b) {
                    acc(b, matmul_at_raw(g, val(a), m, n, k));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                acc(a, Tensor::matrix(r, c, g.to_vec()).unwrap().transpose().into_data());
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, elementwise(a, &|i| g[i] * vb[i]));
                acc(b, elementwise(b, &|i| g[i] * va[i]));
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, elementwise(a, &|i| g[i] / vb[i]));
                acc(b, elementwise(b, &|i| -g[i] * va[i] / (vb[i] * vb[i])));
            }
            &Op::AddRow(x, row) => {
                acc(x, g.to_vec());
                let c = val(row).len();
                let mut gb = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    gb[i % c] += gv;
                }
                acc(row, gb);
            }
            &Op::Scale(x, s) => acc(x, g.iter().map(|v| v * s).collect()),
            &Op::AddScalar(x) => acc(x, g.to_vec()),
            &Op::Relu(x) => {
                let vx = val(x);
                acc(x, elementwise(x, &|i| if vx[i] > 0.0 { g[i] } else { 0.0 }));
            }
            &Op::Sigmoid(x) => acc(x, elementwise(x, &|i| g[i] * out[i] * (1.0 - out[i]))),
            &Op::Softplus(x) => {
                let vx = val(x);
                acc(x, elementwise(x, &|i| g[i] * sigmoid(vx[i])));
            }
            &Op::Exp(x) => acc(x, elementwise(x, &|i| g[i] * out[i])),
            &Op::Abs(x) => {
                let vx = val(x);
                acc(x, elementwise(x, &|i| g[i] * sign(vx[i])));
            }
            &Op::Maximum(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, elementwise(a, &|i| if va[i] >= vb[i] { g[i] } else { 0.0 }));
                acc(b, elementwise(b, &|i| if va[i] >= vb[i] { 0.0 } else { g[i] }));
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, elementwise(a, &|i| if va[i] <= vb[i] { g[i] } else { 0.0 }));
                acc(b, elementwise(b, &|i| if va[i] <= vb[i] { 0.0 } else { g[i] }));
            }
            &Op::Clamp(x, lo, hi) => {
                let vx = val(x);
                acc(x, elementwise(x, &|i| if vx[i] >= lo && vx[i] <= hi { g[i] } else { 0.0 }));
            }
            &Op::Softmax(x) => {
                let (r, c) = node.value.dims2();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = node.value.dims2();
                let gn = val(*gain);
                if self.ng(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = (0..c).map(|j| gr[j] * gn[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (k, gv) in g.iter().enumerate() {
                    dg[k % c] += gv * xhat[k];
                    db[k % c] += gv;
                }
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + col..i * total + col + c]);
                    }
                    acc(p, gp);
                    col += c;
                }
            }
            &Op::SliceRows(x, start) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; val(x).len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(x, gx);
            }
            &Op::SliceCols(x, start) => {
                let (r, len) = node.value.dims2();
                let c = self.value(x).cols();
                let mut gx = vec![0.0; val(x).len()];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(x, gx);
            }
            Op::GatherRows(x, idx) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; val(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
                acc(*x, gx);
            }
            &Op::Sum(x) => acc(x, vec![g[0]; val(x).len()]),
            &Op::Mean(x) => {
                let n = val(x).len();
                if n > 0 {
                    acc(x, vec![g[0] / n as f64; n]);
                }
            }
            &Op::RowSum(x) => {
                let c = self.value(x).cols();
                acc(x, elementwise(x, &|i| g[i / c]));
            }
            &Op::RowMean(x) => {
                let c = self.value(x).cols();
                acc(x, elementwise(x, &|i| g[i / c] / c as f64));
            }
            &Op::SmoothL1(p, t) => {
                let (vp, vt) = (val(p), val(t));
                let d = |i: usize| {
                    let d = vp[i] - vt[i];
                    if d.abs() < 1.0 {
                        d
                    } else {
                        sign(d)
                    }
                };
                acc(p, elementwise(p, &|i| g[i] * d(i)));
                acc(t, elementwise(t, &|i| -g[i] * d(i)));
            }
            &Op::GaussianKl(mu, lv) => {
                let rows = self.value(mu).rows().max(1) as f64;
                let (vm, vl) = (val(mu), val(lv));
                acc(mu, elementwise(mu, &|i| g[0] * vm[i] / rows));
                acc(lv, elementwise(lv, &|i| g[0] * 0.5 * (vl[i].exp() - 1.0) / rows));
            }
            Op::Focal { logits, targets, params } => {
                let vx = val(*logits);
                acc(*logits, elementwise(*logits, &|i| g[0] * focal_scalar(vx[i], targets[i], *params).1));
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; all zeros when `v` is off the path.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Value and derivative (w.r.t. the logit) of the sigmoid focal loss.
pub fn focal_scalar(x: f64, y: f64, params: FocalParams) -> (f64, f64) {
    let FocalParams { alpha, gamma } = params;
    let p = sigmoid(x);
    // log p = -softplus(-x), log(1 - p) = -softplus(x)
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let q = 1.0 - p;
    let pos_loss = -alpha * q.powf(gamma) * log_p;
    let pos_grad = alpha * gamma * q.powf(gamma) * p * log_p - alpha * q.powf(gamma + 1.0);
    let neg_loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
    let neg_grad = -(1.0 - alpha) * (gamma * p.powf(gamma) * q * log_q - p.powf(gamma + 1.0));
    (y * pos_loss + (1.0 - y) * neg_loss, y * pos_grad + (1.0 - y) * neg_grad)
}

/// Row softmax on a plain tensor. `allow` uses the same row-major layout.
pub fn softmax_rows_raw(x: &Tensor, allow: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if let Some(a) = allow {
        if a.len() != r * c {
            return Err(VqdError::Dimension(format!("mask of {} entries for {r}x{c} logits", a.len())));
        }
    }
    let allowed = |i: usize, j: usize| allow.is_none_or(|a| a[i * c + j]);
    let xs = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            if allowed(i, j) {
                max = max.max(xs[i * c + j]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(VqdError::DegenerateMask { row: i });
        }
        let mut total = 0.0;
        for j in 0..c {
            if allowed(i, j) {
                let e = (xs[i * c + j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(m(&[&[1.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);

        let i = g.constant(Tensor::identity(3));
        let bb = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let p = g.matmul(i, bb).unwrap();
        assert_eq!(g.value(p), g.value(bb));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows_raw(&m(&[&[0.0; 4]]), None).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
        let s = softmax_rows_raw(&m(&[&[1000.0, 0.0]]), None).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = softmax_rows_raw(&m(&[&[1.0, 1.0, 1.0]]), Some(&[true, false, true])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_fails() {
        let err = softmax_rows_raw(&m(&[&[1.0, 2.0], &[1.0, 2.0]]), Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, VqdError::DegenerateMask { row: 1 }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let bias = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = g.constant(m(&[&[3.0, 3.0], &[1.0, -1.0]]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert_relative_eq!(v[2], 1.0, epsilon = 1e-5);
        assert_relative_eq!(v[3], -1.0, epsilon = 1e-5);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, -2.0, 0.5]]));
        let w = g.constant(Tensor::identity(3));
        let zero_b = g.constant(Tensor::vector(vec![0.0; 3]));
        let y = g.linear(x, w, zero_b).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.linear(z, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn smooth_l1_branches() {
        let mut g = Graph::new();
        for (d, want) in [(0.5, 0.125), (2.0, 1.5), (0.0, 0.0), (-2.0, 1.5)] {
            let p = g.constant(Tensor::scalar(d));
            let t = g.constant(Tensor::scalar(0.0));
            let l = g.smooth_l1(p, t).unwrap();
            assert_eq!(g.scalar(l), want);
        }
        let p = g.constant(Tensor::zeros(&[2]));
        let t = g.constant(Tensor::zeros(&[3]));
        assert!(g.smooth_l1(p, t).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mut g = Graph::new();
        let cases = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5), (0.0, 1.0, 0.5 * (std::f64::consts::E - 2.0))];
        for (mu, lv, want) in cases {
            let a = g.constant(Tensor::matrix(1, 1, vec![mu]).unwrap());
            let b = g.constant(Tensor::matrix(1, 1, vec![lv]).unwrap());
            let kl = g.gaussian_kl(a, b).unwrap();
            assert_relative_eq!(g.scalar(kl), want, epsilon = 1e-15);
        }
        let a = g.constant(Tensor::scalar(f64::NAN));
        let b = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.gaussian_kl(a, b), Err(VqdError::NonFinite(_))));
    }

    #[test]
    fn backward_sum_and_unused() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.input(Tensor::vector(vec![5.0, 6.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0; 4]);
        assert_eq!(grads.get(y).data(), &[0.0; 2]);
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(VqdError::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(VqdError::NonScalarLoss(_))));
    }

    #[test]
    fn focal_matches_direct_formula() {
        let p = FocalParams::default();
        for &x in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            let s = sigmoid(x);
            let pos = -0.25 * (1.0 - s).powi(2) * s.ln();
            let neg = -0.75 * s.powi(2) * (1.0 - s).ln();
            assert_relative_eq!(focal_scalar(x, 1.0, p).0, pos, max_relative = 1e-12);
            assert_relative_eq!(focal_scalar(x, 0.0, p).0, neg, max_relative = 1e-12);
        }
    }
}
