//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation of one forward episode in creation
//! order, which is also a topological order, so the backward sweep is a single
//! reverse pass over the node list. Parameters are read from a borrowed
//! [`ParamStore`]; their gradients come back through [`Gradients::params`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations implemented outside this module
/// (CIF, CTC, cosine scoring, ...).
pub trait CustomBackward<T: Scalar>: Send + Sync {
    /// Gradients for each input, in the order the inputs were given.
    /// `None` means "no contribution".
    fn backward(&self, out_grad: &Tensor<T>, inputs: &[&Tensor<T>], output: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    MixRows { a: Var, b: Var, take_b: Vec<bool> },
    Pick { x: Var, idx: Vec<usize> },
    PadCols(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward/backward episode. Single-writer; build a new graph per step.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape(format!("{what}: shapes {:?} and {:?}", a.shape(), b.shape()))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, param_vars: HashMap::new(), no_grad: false }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Runs `f` with gradient recording disabled: every node created inside
    /// is a constant for the backward pass.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.no_grad, true);
        let out = f(self);
        self.no_grad = prev;
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free input that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph built without a parameter store");
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// The parameter a node is bound to, if any.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Value copy that blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul inner dimensions disagree", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.cols());
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_bt inner dimensions disagree", ta, tb));
        }
        let out = matmul_bt_raw(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.rows());
        Ok(self.push(out, Op::MatmulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err(what, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let c = tx.cols();
        let mut out = tx.clone();
        for r in 0..tx.rows() {
            for (o, &b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_finite(t, "softmax")?;
        let out = softmax_rows(t);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_finite(t, "log_softmax")?;
        let out = log_softmax_rows(t);
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm gain/bias", tx, tg));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::from_usize_lossy(c);
        let mut xhat = tx.clone();
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = tx.clone();
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.set(r, j, h);
                out.set(r, j, h * tg.data()[j] + tb.data()[j]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = T::lit(SQRT_2_OVER_PI);
        let c = T::lit(GELU_C);
        let half = T::lit(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    /// Sum of all entries → `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean of all entries → `[1, 1]`; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = if t.is_empty() { T::zero() } else { t.sum() / T::from_usize_lossy(t.len()) };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::Shape(format!("slice_cols {start}..{} of {:?}", start + len, t.shape())));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, out);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols", self.value(parts[0]), self.value(*bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, out);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `idx` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape(format!("gather_rows index {bad} out of {} rows", t.rows())));
        }
        let mut out = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), t.cols(), out);
        Ok(self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, &[table]))
    }

    /// Row `i` of the result is `b[i]` where `take_b[i]`, else `a[i]`.
    pub fn mix_rows(&mut self, a: Var, b: Var, take_b: &[bool]) -> Result<Var> {
        self.same_shape("mix_rows", a, b)?;
        if take_b.len() != self.value(a).rows() {
            return Err(Error::Shape(format!("mix_rows mask length {} for {} rows", take_b.len(), self.value(a).rows())));
        }
        let mut out = self.value(a).clone();
        let tb = self.value(b);
        for (r, &t) in take_b.iter().enumerate() {
            if t {
                out.row_mut(r).copy_from_slice(tb.row(r));
            }
        }
        Ok(self.push(out, Op::MixRows { a, b, take_b: take_b.to_vec() }, &[a, b]))
    }

    /// `out[i] = x[i, idx[i]]`, shape `r×1`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= t.cols()) {
            return Err(Error::Shape(format!("pick {} indices from {:?}", idx.len(), t.shape())));
        }
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let out = Tensor::matrix(idx.len(), 1, out);
        Ok(self.push(out, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Appends constant columns `extra` to the right of `x`; no gradient flows into them.
    pub fn pad_cols(&mut self, x: Var, extra: &Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        if extra.rows() != t.rows() {
            return Err(shape_err("pad_cols", t, extra));
        }
        let cols = t.cols() + extra.cols();
        let mut out = Vec::with_capacity(t.rows() * cols);
        for r in 0..t.rows() {
            out.extend_from_slice(t.row(r));
            out.extend_from_slice(extra.row(r));
        }
        let out = Tensor::matrix(t.rows(), cols, out);
        Ok(self.push(out, Op::PadCols(x), &[x]))
    }

    /// Registers an externally computed value with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, inputs)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, lo);
        }
        let mut params = Vec::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads[v.0].clone() {
                params.push((id, g));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, lo: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut lo[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, matmul_bt_raw(g.data(), tb.data(), m, n, k));
                acc(*b, matmul_at_raw(ta.data(), g.data(), m, k, n));
            }
            Op::MatmulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, matmul_raw(g.data(), tb.data(), m, n, k));
                acc(*b, matmul_at_raw(g.data(), ta.data(), m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                let c = g.cols();
                let mut db = vec![T::zero(); c];
                for r in 0..g.rows() {
                    for (d, &v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*row, Tensor::matrix(1, c, db));
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = y.clone();
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = y.get(r, j) * (g.get(r, j) - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let gs: T = g.row(r).iter().copied().sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d -= y.get(r, j).exp() * gs;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = val(*gain);
                let c = xhat.cols();
                let n = T::from_usize_lossy(c);
                let mut dx = Tensor::zeros(xhat.rows(), c);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..xhat.rows() {
                    let mut dh = vec![T::zero(); c];
                    for j in 0..c {
                        let gv = g.get(r, j);
                        dh[j] = gv * tg.data()[j];
                        dg[j] += gv * xhat.get(r, j);
                        db[j] += gv;
                    }
                    let s1: T = dh.iter().copied().sum();
                    let s2: T = dh.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        let v = rstd[r] / n * (n * dh[j] - s1 - xhat.get(r, j) * s2);
                        dx.set(r, j, v);
                    }
                }
                acc(*x, dx);
                acc(*gain, Tensor::from_vec(val(*gain).shape().to_vec(), dg).expect("gain shape"));
                acc(*bias, Tensor::from_vec(val(*bias).shape().to_vec(), db).expect("bias shape"));
            }
            Op::Gelu(x) => {
                let k = T::lit(SQRT_2_OVER_PI);
                let c = T::lit(GELU_C);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let d = val(*x).zip_map(g, |v, gv| {
                    let u = k * (v + c * v * v * v);
                    let th = u.tanh();
                    let du = k * (T::one() + three * c * v * v);
                    gv * (half * (T::one() + th) + half * v * (T::one() - th * th) * du)
                });
                acc(*x, d);
            }
            Op::Sigmoid(x) => acc(*x, node.value.zip_map(g, |y, gv| gv * y * (T::one() - y))),
            Op::Abs(x) => acc(
                *x,
                val(*x).zip_map(g, |v, gv| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Sum(x) => {
                let t = val(*x);
                acc(*x, Tensor::from_vec(t.shape().to_vec(), vec![g.item(); t.len()]).expect("sum shape"));
            }
            Op::Mean(x) => {
                let t = val(*x);
                if !t.is_empty() {
                    let s = g.item() / T::from_usize_lossy(t.len());
                    acc(*x, Tensor::from_vec(t.shape().to_vec(), vec![s; t.len()]).expect("mean shape"));
                }
            }
            Op::SliceCols { x, start } => {
                let t = val(*x);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..t.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + t.cols()]);
                    }
                    off += t.cols();
                    acc(p, d);
                }
            }
            Op::GatherRows { table, idx } => {
                let t = val(*table);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, d);
            }
            Op::MixRows { a, b, take_b } => {
                let mut da = g.clone();
                let mut db = g.clone();
                for (r, &t) in take_b.iter().enumerate() {
                    let zero_out = if t { &mut da } else { &mut db };
                    zero_out.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Pick { x, idx } => {
                let t = val(*x);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (r, &c) in idx.iter().enumerate() {
                    d.set(r, c, g.get(r, 0));
                }
                acc(*x, d);
            }
            Op::PadCols(x) => {
                let t = val(*x);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    d.row_mut(r).copy_from_slice(&g.row(r)[..t.cols()]);
                }
                acc(*x, d);
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                for (&v, d) in inputs.iter().zip(rule.backward(g, &ins, &node.value)) {
                    if let Some(d) = d {
                        acc(v, d);
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. each parameter that was touched, in id order.
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} input contains non-finite values")))
    }
}

pub fn softmax_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
