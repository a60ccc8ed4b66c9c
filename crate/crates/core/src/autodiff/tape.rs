//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! context to compute vector-Jacobian products. [`Tape::backward`] walks the
//! nodes once in reverse insertion order, which is a valid reverse
//! topological order because inputs always precede their consumers.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sum(Var),
    Mse(Var, Rc<Tensor>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    WeightedAbsSum(Var, Rc<Tensor>),
    AbsSum(Var, f64),
    GatherRows(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Inverse(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// Interior mutability lets nested expressions such as
/// `tape.silu(tape.matmul(x, w)?)` borrow the tape immutably.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// SiLU derivative `s + y (1 - s)` with `s = y / x` read off the forward output.
#[inline]
fn silu_grad_from_output(x: f64, y: f64) -> f64 {
    let s = if x != 0.0 && x > -30.0 { y / x } else { sigmoid(x) };
    s + y * (1.0 - s)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Rc<Tensor>) -> Var {
        self.push_rc(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.val(v).item()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(&self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(&self.val(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(&self.val(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(&self.val(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.needs(&[a, b])))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut out = (*xv).clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), self.needs(&[x, bias])))
    }

    /// Adds row `r % t` of the `t x n` table to row `r` of `x`.
    pub fn add_tiled(&self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.val(x), self.val(table));
        if tv.cols() != xv.cols() || tv.rows() == 0 || xv.rows() % tv.rows() != 0 {
            return Err(Error::shape(
                "add_tiled",
                format!("table {:?} for input {:?}", tv.shape(), xv.shape()),
            ));
        }
        let mut out = (*xv).clone();
        let t = tv.rows();
        for r in 0..out.rows() {
            for (o, p) in out.row_mut(r).iter_mut().zip(tv.row(r % t)) {
                *o += p;
            }
        }
        Ok(self.push(out, Op::AddTiled(x, table), self.needs(&[x, table])))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.val(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), self.needs(&[x]))
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.val(x).map(silu_scalar);
        self.push(out, Op::Silu(x), self.needs(&[x]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(out, Op::Sum(x), self.needs(&[x]))
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&self, pred: Var, target: Rc<Tensor>) -> Result<Var> {
        let pv = self.val(pred);
        pv.expect_same_shape(&target, "mse")?;
        let n = pv.len().max(1) as f64;
        let sq: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(sq / n),
            Op::Mse(pred, target),
            self.needs(&[pred]),
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.val(logits);
        if lv.rows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit rows for {} labels", lv.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let probs = softmax_rows(&lv);
        let mut nll = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let (arg, max) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            nll += (max - row[label]) + rest.ln_1p();
        }
        let n = labels.len().max(1) as f64;
        Ok(self.push(
            Tensor::scalar(nll / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            self.needs(&[logits]),
        ))
    }

    /// `sum(weights .* |x|)` with constant weights; the subgradient at 0 is 0.
    pub fn weighted_abs_sum(&self, x: Var, weights: Rc<Tensor>) -> Result<Var> {
        let xv = self.val(x);
        xv.expect_same_shape(&weights, "weighted_abs_sum")?;
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(v, w)| w * v.abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedAbsSum(x, weights),
            self.needs(&[x]),
        ))
    }

    /// `c * sum(|x|)`.
    pub fn abs_sum(&self, x: Var, c: f64) -> Var {
        let s = c * self.val(x).sum_abs();
        self.push(Tensor::scalar(s), Op::AbsSum(x, c), self.needs(&[x]))
    }

    /// Row lookup: output row `i` is `table[idx[i]]`.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.val(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for {} rows",
                tv.rows()
            )));
        }
        let out = tv.select_rows(idx);
        Ok(self.push(
            out,
            Op::GatherRows(table, idx.to_vec()),
            self.needs(&[table]),
        ))
    }

    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        if idx.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::shape("select_rows", "row index out of range"));
        }
        let out = xv.select_rows(idx);
        Ok(self.push(out, Op::SelectRows(x, idx.to_vec()), self.needs(&[x])))
    }

    pub fn select_cols(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        if idx.iter().any(|&i| i >= xv.cols()) {
            return Err(Error::shape("select_cols", "column index out of range"));
        }
        let out = xv.select_cols(idx);
        Ok(self.push(out, Op::SelectCols(x, idx.to_vec()), self.needs(&[x])))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let rows = vals.first().map_or(0, |v| v.rows());
        if vals.iter().any(|v| v.rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), self.needs(parts)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let cols = vals.first().map_or(0, |v| v.cols());
        if vals.iter().any(|v| v.cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.needs(parts)))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.val(x);
        let out = Tensor::new(rows, cols, xv.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x), self.needs(&[x])))
    }

    /// Matrix inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self, x: Var) -> Result<Var> {
        let out = invert(&self.val(x))?;
        Ok(self.push(out, Op::Inverse(x), self.needs(&[x])))
    }

    /// Single-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `(batch * seq_len) x d` with each sequence stored in
    /// consecutive rows. Position `t` attends to positions `0..=t` only; future
    /// positions are excluded from the softmax rather than masked with a large
    /// negative number, so they have exactly zero influence.
    pub fn causal_attention(&self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        if qv.shape() != kv.shape() || qv.rows() != vv.rows() {
            return Err(Error::shape(
                "causal_attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if seq_len == 0 || qv.rows() % seq_len != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("{} rows not divisible by sequence length {seq_len}", qv.rows()),
            ));
        }
        let d = qv.cols();
        let dv = vv.cols();
        let scale = 1.0 / (d.max(1) as f64).sqrt();
        let batch = qv.rows() / seq_len;
        let mut probs = vec![0.0; batch * seq_len * seq_len];
        let mut out = Tensor::zeros(qv.rows(), dv);
        for b in 0..batch {
            let base = b * seq_len;
            for t in 0..seq_len {
                let qrow = qv.row(base + t);
                let p = &mut probs[(b * seq_len + t) * seq_len..(b * seq_len + t + 1) * seq_len];
                let mut max = f64::NEG_INFINITY;
                for (u, pu) in p.iter_mut().enumerate().take(t + 1) {
                    let s = dot(qrow, kv.row(base + u)) * scale;
                    *pu = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pu in p.iter_mut().take(t + 1) {
                    *pu = (*pu - max).exp();
                    z += *pu;
                }
                for pu in p.iter_mut().take(t + 1) {
                    *pu /= z;
                }
                let orow = out.row_mut(base + t);
                for (u, &pu) in p.iter().enumerate().take(t + 1) {
                    for (o, &x) in orow.iter_mut().zip(vv.row(base + u)) {
                        *o += pu * x;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                probs,
            },
            self.needs(&[q, k, v]),
        ))
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if loss.0 >= n {
            return Err(Error::invalid("loss node is not on this tape"));
        }
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let val = |v: Var| &*nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor| {
                if !needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.axpy(1.0, &t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let mut ga = Tensor::zeros(av.rows(), av.cols());
                        gemm(MatRef::normal(&g), MatRef::transposed(bv), &mut ga, 0.0);
                        acc(*a, ga);
                    }
                    if needs(*b) {
                        let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                        gemm(MatRef::transposed(av), MatRef::normal(&g), &mut gb, 0.0);
                        acc(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |x, y| x * y)?;
                    let gb = g.zip_map(val(*a), |x, y| x * y)?;
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddBias(x, b) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                    acc(*x, g);
                }
                Op::AddTiled(x, table) => {
                    let tv = val(*table);
                    let t = tv.rows();
                    let mut gt = Tensor::zeros(t, tv.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gt.row_mut(r % t).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*table, gt);
                    acc(*x, g);
                }
                Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
                Op::Silu(x) => {
                    let xv = val(*x);
                    let mut gx = g;
                    for ((o, &a), &y) in gx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                        *o *= silu_grad_from_output(a, y);
                    }
                    acc(*x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = val(*x).shape();
                    acc(*x, Tensor::filled(r, c, g.item()?));
                }
                Op::Mse(pred, target) => {
                    let pv = val(*pred);
                    let k = 2.0 * g.item()? / pv.len().max(1) as f64;
                    acc(*pred, pv.zip_map(target, |p, t| k * (p - t))?);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = g.item()? / labels.len().max(1) as f64;
                    let mut gl = probs.map(|p| p * k);
                    for (r, &l) in labels.iter().enumerate() {
                        let cur = gl.get(r, l);
                        gl.set(r, l, cur - k);
                    }
                    acc(*logits, gl);
                }
                Op::WeightedAbsSum(x, w) => {
                    let s = g.item()?;
                    let gx = val(*x).zip_map(w, |v, d| s * d * sign(v))?;
                    acc(*x, gx);
                }
                Op::AbsSum(x, c) => {
                    let s = g.item()? * c;
                    acc(*x, val(*x).map(|v| s * sign(v)));
                }
                Op::GatherRows(table, idx) => {
                    let tv = val(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*table, gt);
                }
                Op::SelectRows(x, idx) => {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*x, gx);
                }
                Op::SelectCols(x, idx) => {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for (j, &c) in idx.iter().enumerate() {
                            let cur = gx.get(r, c);
                            gx.set(r, c, cur + g.get(r, j));
                        }
                    }
                    acc(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let gp = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        offset += w;
                        acc(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (h, w) = val(p).shape();
                        let gp = Tensor::new(h, w, g.data()[offset * w..(offset + h) * w].to_vec())?;
                        offset += h;
                        acc(p, gp);
                    }
                }
                Op::Reshape(x) => {
                    let (r, c) = val(*x).shape();
                    acc(*x, Tensor::new(r, c, g.into_data())?);
                }
                Op::Inverse(x) => {
                    // d(A^-1) = -A^-1 dA A^-1  =>  grad_A = -A^-T G A^-T
                    let inv_t = node.value.transpose();
                    let gx = inv_t.matmul(&g)?.matmul(&inv_t)?.map(|v| -v);
                    acc(*x, gx);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    seq_len,
                    probs,
                } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let t_len = *seq_len;
                    let scale = 1.0 / (qv.cols().max(1) as f64).sqrt();
                    let mut gq = Tensor::zeros(qv.rows(), qv.cols());
                    let mut gk = Tensor::zeros(kv.rows(), kv.cols());
                    let mut gv = Tensor::zeros(vv.rows(), vv.cols());
                    let batch = qv.rows() / t_len;
                    let mut dp = vec![0.0; t_len];
                    for b in 0..batch {
                        let base = b * t_len;
                        for t in 0..t_len {
                            let p = &probs[(b * t_len + t) * t_len..(b * t_len + t + 1) * t_len];
                            let grow = g.row(base + t);
                            let mut weighted = 0.0;
                            for u in 0..=t {
                                dp[u] = dot(grow, vv.row(base + u));
                                weighted += p[u] * dp[u];
                                for (o, &x) in gv.row_mut(base + u).iter_mut().zip(grow) {
                                    *o += p[u] * x;
                                }
                            }
                            for u in 0..=t {
                                let ds = p[u] * (dp[u] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for (o, &x) in gq.row_mut(base + t).iter_mut().zip(kv.row(base + u)) {
                                    *o += ds * x;
                                }
                                for (o, &x) in gk.row_mut(base + u).iter_mut().zip(qv.row(base + t)) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                    acc(*q, gq);
                    acc(*k, gk);
                    acc(*v, gv);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Inverse of a square matrix; errors when a pivot is numerically zero.
pub fn invert(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("inverse", format!("{:?} is not square", a.shape())));
    }
    let mut m = a.clone();
    let mut inv = Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .unwrap_or(col);
        if m.get(pivot, col).abs() <= 1e-14 * scale {
            return Err(Error::invalid("matrix is singular"));
        }
        m.swap_rows(col, pivot);
        inv.swap_rows(col, pivot);
        let p = m.get(col, col);
        for c in 0..n {
            m.set(col, c, m.get(col, c) / p);
            inv.set(col, c, inv.get(col, c) / p);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m.get(r, col);
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m.set(r, c, m.get(r, c) - f * m.get(col, c));
                inv.set(r, c, inv.get(r, c) - f * inv.get(col, c));
            }
        }
    }
    Ok(inv)
}
