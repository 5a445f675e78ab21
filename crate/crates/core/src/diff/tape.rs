//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar output
//! with respect to every leaf and parameter that took part.

use std::collections::HashMap;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    MeanRows(Var),
    Row(Var, usize),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    LogSoftmaxPick {
        x: Var,
        probs: Vec<f64>,
        index: usize,
    },
    SoftmaxMasked(Var),
    Kl(Var, Var),
    Mse(Var, Var),
    Norm2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into `params.grad`.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        self.accumulate_scaled_into(params, 1.0);
    }

    /// Adds `factor` times the parameter gradients into `params.grad`.
    pub fn accumulate_scaled_into(&self, params: &mut ParamSet, factor: f64) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                let dst = params.get_mut(id).grad.data_mut();
                for (d, x) in dst.iter_mut().zip(g.data()) {
                    *d += factor * x;
                }
            }
        }
    }
}

fn check(cond: bool, context: &str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(context, detail()))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same variable.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        let v = self.push(params.get(id).value.clone(), Op::Param, true);
        self.params.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k, k2, m) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        check(k == k2, "matmul", || format!("[{n}, {k}] x [{k2}, {m}]"))?;
        let mut out = vec![0.0; n * m];
        matmul_into(va.data(), vb.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check(va.shape() == vb.shape(), name, || {
            format!("{:?} vs {:?}", va.shape(), vb.shape())
        })?;
        let value = va.zip_map(vb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a (n x k) + b (1 x k)` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let k = va.cols();
        check(vb.rows() == 1 && vb.cols() == k, "add_row", || {
            format!("{:?} + {:?}", va.shape(), vb.shape())
        })?;
        let mut value = va.clone();
        for row in value.data_mut().chunks_mut(k.max(1)) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("logarithm of a nonpositive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column means: `n x k -> 1 x k`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, k) = (va.rows(), va.cols());
        let mut out = vec![0.0; k];
        for row in va.data().chunks(k.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = if n > 0 { 1.0 / n as f64 } else { 0.0 };
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let va = self.value(a);
        check(i < va.rows(), "row", || format!("row {i} of {:?}", va.shape()))?;
        let value = Tensor::row(va.row_slice(i).to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Row(a, i), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, k) = (va.rows(), va.cols());
        check(start <= end && end <= k, "slice_cols", || {
            format!("{start}..{end} of {k} columns")
        })?;
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for row in va.data().chunks(k.max(1)).take(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, w, out)?, Op::SliceCols(a, start, end), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, k) = (va.rows(), va.cols());
        check(start <= end && end <= n, "slice_rows", || {
            format!("{start}..{end} of {n} rows")
        })?;
        let value = Tensor::matrix(end - start, k, va.data()[start * k..end * k].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |&p| self.value(p).rows());
        check(
            parts.iter().all(|&p| self.value(p).rows() == n),
            "concat_cols",
            || "row counts differ".into(),
        )?;
        let k: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(n, k, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let k = parts.first().map_or(0, |&p| self.value(p).cols());
        check(
            parts.iter().all(|&p| self.value(p).cols() == k),
            "concat_rows",
            || "column counts differ".into(),
        )?;
        let n: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(n * k);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(n, k, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// `log softmax(x)[index]` over the entries where `mask` is true.
    pub fn log_softmax_pick(&mut self, x: Var, mask: &[bool], index: usize) -> Result<Var> {
        let vx = self.value(x);
        check(mask.len() == vx.len(), "log_softmax_pick", || {
            format!("mask of {} for {} logits", mask.len(), vx.len())
        })?;
        if index >= mask.len() || !mask[index] {
            return Err(Error::Domain(format!(
                "picked entry {index} is masked out or out of range"
            )));
        }
        let probs = masked_softmax(vx.data(), mask)?;
        let max = masked_max(vx.data(), mask);
        let lse = vx
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| (l - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        let value = vx.data()[index] - lse;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::LogSoftmaxPick { x, probs, index }, rg))
    }

    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        check(mask.len() == vx.len(), "softmax", || {
            format!("mask of {} for {} logits", mask.len(), vx.len())
        })?;
        let probs = masked_softmax(vx.data(), mask)?;
        let value = Tensor::new(vx.shape().to_vec(), probs)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxMasked(x), rg))
    }

    /// `sum 0.5 (mu^2 + sigma^2 - 1 - 2 ln sigma)`.
    pub fn kl_standard_normal(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        let value = super::nn::kl_standard_normal(self.value(mu), self.value(sigma))?;
        let rg = self.rg(mu) || self.rg(sigma);
        Ok(self.push(Tensor::scalar(value), Op::Kl(mu, sigma), rg))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let value = super::nn::mse(self.value(pred), self.value(target))?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(value), Op::Mse(pred, target), rg))
    }

    /// Euclidean norm of all entries.
    pub fn norm2(&mut self, a: Var) -> Var {
        let value = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(a);
        self.push(Tensor::scalar(value), Op::Norm2(a), rg)
    }

    /// `x W + b` with `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.0 <= output.0)
            .map(|(&id, &v)| (ParamId(id), v))
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_nt_into(g.data(), vb.data(), &mut da, n, m, k);
                    acc(*a, Tensor::new(va.shape().to_vec(), da).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(va.data(), g.data(), &mut db, n, k, m);
                    acc(*b, Tensor::new(vb.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    let k = g.cols();
                    let mut db = vec![0.0; k];
                    for row in g.data().chunks(k.max(1)) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::Exp(a) => acc(*a, g.zip_map(y, |d, e| d * e)),
            Op::Ln(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d / x)),
            Op::Sum(a) => acc(*a, Tensor::filled(self.value(*a).shape(), g.item())),
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let n = va.rows().max(1) as f64;
                let mut d = Tensor::zeros(va.shape());
                let k = va.cols();
                for row in d.data_mut().chunks_mut(k.max(1)) {
                    for (x, gj) in row.iter_mut().zip(g.data()) {
                        *x = gj / n;
                    }
                }
                acc(*a, d);
            }
            Op::Row(a, i) => {
                let va = self.value(*a);
                let mut d = Tensor::zeros(va.shape());
                let k = va.cols();
                d.data_mut()[i * k..(i + 1) * k].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::SliceCols(a, start, end) => {
                let va = self.value(*a);
                let k = va.cols();
                let w = end - start;
                let mut d = Tensor::zeros(va.shape());
                for (r, grow) in g.data().chunks(w.max(1)).enumerate().take(va.rows()) {
                    d.data_mut()[r * k + start..r * k + end].copy_from_slice(grow);
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let k = va.cols();
                let mut d = Tensor::zeros(va.shape());
                d.data_mut()[start * k..start * k + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, Tensor::new(self.value(p).shape().to_vec(), d).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        acc(p, Tensor::new(self.value(p).shape().to_vec(), d).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::LogSoftmaxPick { x, probs, index } => {
                let gv = g.item();
                let mut d: Vec<f64> = probs.iter().map(|p| -gv * p).collect();
                d[*index] += gv;
                acc(*x, Tensor::new(self.value(*x).shape().to_vec(), d).expect("shape"));
            }
            Op::SoftmaxMasked(x) => {
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                acc(*x, y.zip_map(g, |p, d| p * (d - dot)));
            }
            Op::Kl(mu, sigma) => {
                let gv = g.item();
                acc(*mu, self.value(*mu).map(|m| gv * m));
                acc(*sigma, self.value(*sigma).map(|s| gv * (s - 1.0 / s)));
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g.item() / vp.len().max(1) as f64;
                acc(*p, vp.zip_map(vt, |a, b| scale * (a - b)));
                acc(*t, vp.zip_map(vt, |a, b| -scale * (a - b)));
            }
            Op::Norm2(a) => {
                let norm = y.item();
                let gv = g.item();
                let va = self.value(*a);
                if norm > 0.0 {
                    acc(*a, va.map(|x| gv * x / norm));
                }
            }
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

fn masked_max(logits: &[f64], mask: &[bool]) -> f64 {
    logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax restricted to `mask`; masked entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptySupport);
    }
    let max = masked_max(logits, mask);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}
