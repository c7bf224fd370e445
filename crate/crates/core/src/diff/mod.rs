//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Values are computed
//! eagerly; [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar output with respect to every node.
//!
//! The primitive set is deliberately small: it covers exactly what graph
//! propagation, attention pooling and the re-identification losses need.
//! Binary element-wise primitives broadcast their *right* operand when it has
//! a unit row or column dimension (`[1, c]`, `[r, 1]` or `[1, 1]`); nothing
//! else broadcasts.
//!
//! Any primitive that produces a NaN or infinity fails with
//! [`Error::NonFinite`] naming the primitive.
//!
//! ```
//! use agrl::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(0.0).unwrap());
//! let y = tape.softplus(x).unwrap();
//! assert!((tape.value(y).data()[0] - 2f64.ln()).abs() < 1e-15);
//! let grads = tape.backward(y).unwrap();
//! assert!((grads.get(x).data()[0] - 0.5).abs() < 1e-15);
//! ```

mod gradcheck;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use tensor::matmul_raw;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for rank-2 tensors. Reductions keep the reduced dimension
/// with size 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over the row index: `[r, c] -> [1, c]`.
    Rows,
    /// Reduce over the column index: `[r, c] -> [r, 1]`.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Sqrt(Var),
    LogSumExp(Var, Axis),
    Sum(Var, Axis),
    Mean(Var, Axis),
    SumAll(Var),
    L1Norm(Var, Axis),
    SqDist(Var, Var),
    IndexSelect(Var, Vec<usize>),
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracks_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Operands are always recorded before their consumers, so the node order is
/// a topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())))
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Checks that `rhs` can broadcast onto `lhs` under the unit-dimension rule.
fn broadcast_ok(lhs: &Tensor, rhs: &Tensor) -> bool {
    if lhs.shape() == rhs.shape() {
        return true;
    }
    if !lhs.is_matrix() || !rhs.is_matrix() {
        return false;
    }
    let (r, c) = (lhs.rows(), lhs.cols());
    let (r2, c2) = (rhs.rows(), rhs.cols());
    (r2 == r || r2 == 1) && (c2 == c || c2 == 1)
}

fn broadcast_map(lhs: &Tensor, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if lhs.shape() == rhs.shape() {
        let data = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        return Tensor::from_parts(lhs.shape().to_vec(), data);
    }
    let (r, c) = (lhs.rows(), lhs.cols());
    let (r2, c2) = (rhs.rows(), rhs.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ri = if r2 == 1 { 0 } else { i };
        for j in 0..c {
            let cj = if c2 == 1 { 0 } else { j };
            out.push(f(lhs.data()[i * c + j], rhs.data()[ri * c2 + cj]));
        }
    }
    Tensor::from_parts(vec![r, c], out)
}

/// Sums `g` (shaped like the lhs) down to the broadcast shape of `target`.
fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let (r, c) = (g.rows(), g.cols());
    let (r2, c2) = (target[0], target[1]);
    let mut out = vec![0.0; r2 * c2];
    for i in 0..r {
        let ri = if r2 == 1 { 0 } else { i };
        for j in 0..c {
            let cj = if c2 == 1 { 0 } else { j };
            out[ri * c2 + cj] += g.data()[i * c + j];
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor, op: Op, tracks_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracks_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let tracks = inputs.iter().any(|&v| self.tracks(v));
        Ok(self.push(value, op, tracks))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcast_ok(va, vb) {
            return Err(Error::shape(
                name,
                format!("cannot broadcast {:?} onto {:?}", vb.shape(), va.shape()),
            ));
        }
        let out = broadcast_map(va, vb, f);
        self.record(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_raw(va, vb);
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.record("exp", out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.record("ln", out, Op::Ln(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus_scalar);
        self.record("softplus", out, Op::Softplus(a), &[a])
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.record("sqrt", out, Op::Sqrt(a), &[a])
    }

    pub fn log_sum_exp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        require_matrix("log_sum_exp", v)?;
        let out = reduce_axis(v, axis, |xs| {
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        });
        self.record("log_sum_exp", out, Op::LogSumExp(a, axis), &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        require_matrix("sum", v)?;
        let out = reduce_axis(v, axis, |xs| xs.iter().sum());
        self.record("sum", out, Op::Sum(a, axis), &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        require_matrix("mean", v)?;
        let out = reduce_axis(v, axis, |xs| xs.iter().sum::<f64>() / xs.len() as f64);
        self.record("mean", out, Op::Mean(a, axis), &[a])
    }

    /// Sum of every entry, as a `[1, 1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.record("sum_all", Tensor::from_parts(vec![1, 1], vec![s]), Op::SumAll(a), &[a])
    }

    /// L1 norm along an axis. The sign at exactly zero is taken as zero.
    pub fn l1_norm(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        require_matrix("l1_norm", v)?;
        let out = reduce_axis(v, axis, |xs| xs.iter().map(|x| x.abs()).sum());
        self.record("l1_norm", out, Op::L1Norm(a, axis), &[a])
    }

    /// Row-wise squared Euclidean distance between two `[r, c]` tensors: `[r, 1]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || va.shape() != vb.shape() {
            return Err(Error::shape(
                "sq_dist",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out: Vec<f64> = (0..va.rows())
            .map(|i| {
                va.row(i)
                    .iter()
                    .zip(vb.row(i))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let rows = out.len();
        self.record("sq_dist", Tensor::from_parts(vec![rows, 1], out), Op::SqDist(a, b), &[a, b])
    }

    /// Rows of `a` at `indices`, in order; indices may repeat.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        require_matrix("index_select", v)?;
        if indices.is_empty() {
            return Err(Error::shape("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::shape(
                "index_select",
                format!("row {bad} out of range for {:?}", v.shape()),
            ));
        }
        let out = v.select_rows(indices);
        self.record("index_select", out, Op::IndexSelect(a, indices.to_vec()), &[a])
    }

    /// Stacks rank-2 tensors with equal column counts along the row axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.cols() != cols {
                return Err(Error::shape(
                    "concat",
                    format!("operand {:?} does not have {cols} columns", v.shape()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.record(
            "concat",
            Tensor::from_parts(vec![rows, cols], data),
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    /// Training-mode batch normalization of `x: [m, d]` over its rows, with
    /// per-channel `gain` and `shift` of shape `[1, d]`. Uses the biased batch
    /// variance. Requires `m >= 2`.
    pub fn batch_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        require_matrix("batch_norm", vx)?;
        let (m, d) = (vx.rows(), vx.cols());
        if m < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("training statistics need at least 2 rows, got {m}"),
            ));
        }
        for (name, p) in [("gain", gain), ("shift", shift)] {
            let vp = self.value(p);
            if vp.shape() != [1, d] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has shape {:?}, expected [1, {d}]", vp.shape()),
                ));
            }
        }
        let mut mean = vec![0.0; d];
        for i in 0..m {
            for (mu, x) in mean.iter_mut().zip(vx.row(i)) {
                *mu += x;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut var = vec![0.0; d];
        for i in 0..m {
            for ((s, x), mu) in var.iter_mut().zip(vx.row(i)).zip(&mean) {
                *s += (x - mu) * (x - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..d {
                normalized[i * d + j] = (vx.at(i, j) - mean[j]) * inv_std[j];
            }
        }
        let normalized = Tensor::from_parts(vec![m, d], normalized);
        let (g, b) = (self.value(gain).data(), self.value(shift).data());
        let mut out = normalized.clone();
        for i in 0..m {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.record(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
                mean,
                var,
            },
            &[x, gain, shift],
        )
    }

    /// Batch mean and biased batch variance used by a `batch_norm` node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: out_value.shape().to_vec(),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out_value.shape()));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.tracks_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if self.tracks(to) {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn propagate_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                if self.tracks(*b) {
                    let gb = reduce_to(g, self.value(*b).shape());
                    self.send(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                if self.tracks(*b) {
                    let gb = reduce_to(&g.map(|x| -x), self.value(*b).shape());
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    self.send(grads, *a, broadcast_map(g, vb, |x, y| x * y));
                }
                if self.tracks(*b) {
                    let prod = Tensor::from_parts(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                    );
                    self.send(grads, *b, reduce_to(&prod, vb.shape()));
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.map(|x| x * s)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    self.send(grads, *a, matmul_raw(g, &vb.transpose()));
                }
                if self.tracks(*b) {
                    self.send(grads, *b, matmul_raw(&va.transpose(), g));
                }
            }
            Op::Exp(a) => {
                let ga = zip_with(g, &node.value, |g, y| g * y);
                self.send(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = zip_with(g, self.value(*a), |g, x| g / x);
                self.send(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_with(g, self.value(*a), |g, x| g * sigmoid(x));
                self.send(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = zip_with(g, &node.value, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
                self.send(grads, *a, ga);
            }
            Op::LogSumExp(a, axis) => {
                let va = self.value(*a);
                let lse = &node.value;
                let ga = expand_axis(va, *axis, |i, j, x| {
                    let (gi, li) = reduced_at(g, lse, *axis, i, j);
                    gi * (x - li).exp()
                });
                self.send(grads, *a, ga);
            }
            Op::Sum(a, axis) => {
                let va = self.value(*a);
                let ga = expand_axis(va, *axis, |i, j, _| reduced_at(g, g, *axis, i, j).0);
                self.send(grads, *a, ga);
            }
            Op::Mean(a, axis) => {
                let va = self.value(*a);
                let n = match axis {
                    Axis::Rows => va.rows(),
                    Axis::Cols => va.cols(),
                } as f64;
                let ga = expand_axis(va, *axis, |i, j, _| reduced_at(g, g, *axis, i, j).0 / n);
                self.send(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::L1Norm(a, axis) => {
                let va = self.value(*a);
                let ga = expand_axis(va, *axis, |i, j, x| {
                    let sign = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    reduced_at(g, g, *axis, i, j).0 * sign
                });
                self.send(grads, *a, ga);
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = va.cols();
                let mut ga = vec![0.0; va.numel()];
                for i in 0..va.rows() {
                    let gi = g.data()[i];
                    for j in 0..c {
                        ga[i * c + j] = 2.0 * gi * (va.at(i, j) - vb.at(i, j));
                    }
                }
                let ga = Tensor::from_parts(va.shape().to_vec(), ga);
                if self.tracks(*b) {
                    self.send(grads, *b, ga.map(|x| -x));
                }
                self.send(grads, *a, ga);
            }
            Op::IndexSelect(a, indices) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = Tensor::zeros(va.shape());
                for (k, &i) in indices.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (d, s) in ga.row_mut(i).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.numel();
                    if self.tracks(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.send(grads, p, Tensor::from_parts(vp.shape().to_vec(), slice));
                    }
                    offset += len;
                }
            }
            Op::BatchNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
                ..
            } => {
                let (m, d) = (normalized.rows(), normalized.cols());
                let gv = self.value(*gain).data();
                let mut g_gain = vec![0.0; d];
                let mut g_shift = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        let gij = g.at(i, j);
                        g_shift[j] += gij;
                        g_gain[j] += gij * normalized.at(i, j);
                    }
                }
                if self.tracks(*x) {
                    // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            let dxhat = g.at(i, j) * gv[j];
                            sum_dxhat[j] += dxhat;
                            sum_dxhat_xhat[j] += dxhat * normalized.at(i, j);
                        }
                    }
                    let mf = m as f64;
                    let mut gx = vec![0.0; m * d];
                    for i in 0..m {
                        for j in 0..d {
                            let dxhat = g.at(i, j) * gv[j];
                            gx[i * d + j] = inv_std[j] / mf
                                * (mf * dxhat - sum_dxhat[j] - normalized.at(i, j) * sum_dxhat_xhat[j]);
                        }
                    }
                    self.send(grads, *x, Tensor::from_parts(vec![m, d], gx));
                }
                self.send(grads, *gain, Tensor::from_parts(vec![1, d], g_gain));
                self.send(grads, *shift, Tensor::from_parts(vec![1, d], g_shift));
            }
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn reduce_axis(v: &Tensor, axis: Axis, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (r, c) = (v.rows(), v.cols());
    match axis {
        Axis::Cols => Tensor::from_parts(vec![r, 1], (0..r).map(|i| f(v.row(i))).collect()),
        Axis::Rows => {
            let mut col = vec![0.0; r];
            let out = (0..c)
                .map(|j| {
                    for (i, slot) in col.iter_mut().enumerate() {
                        *slot = v.at(i, j);
                    }
                    f(&col)
                })
                .collect();
            Tensor::from_parts(vec![1, c], out)
        }
    }
}

/// Values of two reduced tensors at the reduced position of `(i, j)`.
fn reduced_at(a: &Tensor, b: &Tensor, axis: Axis, i: usize, j: usize) -> (f64, f64) {
    let k = match axis {
        Axis::Rows => j,
        Axis::Cols => i,
    };
    (a.data()[k], b.data()[k])
}

fn expand_axis(v: &Tensor, _axis: Axis, f: impl Fn(usize, usize, f64) -> f64) -> Tensor {
    let (r, c) = (v.rows(), v.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(i, j, v.at(i, j)));
        }
    }
    Tensor::from_parts(vec![r, c], out)
}
