//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends one node holding its output value. A node
//! requires gradient when any of its inputs does, and `backward` walks the
//! record from the loss node down to the first node exactly once.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::diffcore::tensor::{gemm, gemm_into};
use crate::diffcore::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumLast(Var),
    GroupSumRows(Var, usize),
    L2Normalize(Var, Vec<f64>),
    GatherRows(Var, Arc<[usize]>),
    GatherFlat(Var, Arc<[usize]>),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Jsd(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    track_kinks: bool,
    signature: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    bound: HashMap<String, Var>,
}

impl Gradients {
    /// Gradient of a leaf or bound parameter; intermediate results are not
    /// retained.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `var`, or zeros when nothing reached it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Adds the gradient of every parameter bound on the tape into
    /// `param.grad`.
    pub fn accumulate<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            let Some(&var) = self.bound.get(&p.name) else {
                continue;
            };
            if let Some(g) = &self.grads[var.0] {
                for (acc, v) in p.grad.values_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: "input contains NaN or infinity".into(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a hash of the activation pattern of every kinked op (and any
    /// branch noted with [`Tape::note_branch`]), so a caller can tell when
    /// two evaluations took different linear pieces.
    pub fn with_kink_tracking() -> Self {
        Self {
            track_kinks: true,
            ..Self::default()
        }
    }

    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn note_branch(&mut self, data: &[usize]) {
        if self.track_kinks {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            self.signature.hash(&mut h);
            data.hash(&mut h);
            self.signature = h.finish();
        }
    }

    fn note_kinks(&mut self, x: &Tensor) {
        if self.track_kinks {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            self.signature.hash(&mut h);
            for &v in x.values() {
                // three-way so that landing exactly on a kink also registers
                let s: i8 = if v > 0.0 {
                    1
                } else if v < 0.0 {
                    -1
                } else {
                    0
                };
                s.hash(&mut h);
            }
            self.signature = h.finish();
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A value that does not receive gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A value that receives gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter, once per tape. Frozen parameters become constants.
    pub fn bind(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.bound.insert(p.name.clone(), v);
        v
    }

    /// Makes later `bind` calls for `name` return `var`, so a parameter can
    /// be driven from an explicit leaf.
    pub fn bind_to(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = gemm(ta.values(), tb.values(), m, k, n, false, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let out = gemm(ta.values(), tb.values(), m, k, n, false, true);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let out = ta.zip_map(tb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector (length = last axis) to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(tb.values()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    /// Scales row `r` of `x` by `w[r]`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let c = tx.cols();
        if tw.numel() != tx.rows() {
            return Err(shape_err("mul_col", tx, tw));
        }
        let mut out = tx.values().to_vec();
        for (row, &s) in out.chunks_mut(c).zip(tw.values()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(x) || self.rg(w);
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::MulCol(x, w), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x).clone();
        self.note_kinks(&tx);
        let out = tx.map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `max(0, x)`; identical to [`Tape::relu`].
    pub fn hinge(&mut self, x: Var) -> Var {
        self.relu(x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let tx = self.value(x).clone();
        self.note_kinks(&tx);
        let out = tx.map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if let Some(bad) = tx.values().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of non-positive or non-finite value {bad}"),
            });
        }
        let out = tx.map(f64::ln);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        require_finite("softmax", tx)?;
        let out = softmax_rows(tx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        require_finite("log_softmax", tx)?;
        let c = tx.cols();
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// Concatenation over the last axis of 2-D tensors with equal row counts.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat of zero tensors"));
        };
        let rows = self.value(first).rows();
        for &x in xs {
            if self.value(x).rows() != rows {
                return Err(shape_err("concat", self.value(first), self.value(x)));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let t = Tensor::new(&[rows, total], out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::scalar(tx.sum() / tx.numel() as f64);
        let rg = self.rg(x);
        self.push(out, Op::MeanAll(x), rg)
    }

    /// Sums over rows: `R x C -> 1 x C`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0; c];
        for row in tx.values().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::row(out), Op::SumRows(x), rg)
    }

    /// Sums over the last axis: `R x C -> R x 1`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out: Vec<f64> = tx.values().chunks(tx.cols()).map(|r| r.iter().sum()).collect();
        let rows = out.len();
        let rg = self.rg(x);
        let t = Tensor::new(&[rows, 1], out).expect("sum_last shape");
        self.push(t, Op::SumLast(x), rg)
    }

    /// Sums consecutive groups of `group` rows: `R x C -> (R/group) x C`.
    pub fn group_sum_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if group == 0 || r % group != 0 {
            return Err(Error::Shape {
                op: "group_sum_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let mut out = vec![0.0; (r / group) * c];
        for (i, row) in tx.values().chunks(c).enumerate() {
            let dst = &mut out[(i / group) * c..(i / group + 1) * c];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        let t = Tensor::new(&[r / group, c], out)?;
        Ok(self.push(t, Op::GroupSumRows(x, group), rg))
    }

    /// Normalizes every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Domain {
                    op: "l2_normalize",
                    detail: format!("row norm is {n}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::L2Normalize(x, norms), rg))
    }

    /// Selects rows of a 2-D tensor by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            out.extend_from_slice(tx.row_slice(i));
        }
        let rg = self.rg(x);
        let t = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows(x, idx), rg))
    }

    /// Selects individual elements by flat (row-major) index into a vector.
    pub fn gather_flat(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        if idx.is_empty() {
            return Err(Error::invalid("gather_flat with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            match tx.values().get(i) {
                Some(&v) => out.push(v),
                None => {
                    return Err(Error::Shape {
                        op: "gather_flat",
                        lhs: tx.shape().to_vec(),
                        rhs: vec![i],
                    })
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::new(&[idx.len()], out)?;
        Ok(self.push(t, Op::GatherFlat(x, idx), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if start >= end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let t = Tensor::new(&[end - start, c], tx.values()[start * c..end * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows(x, start, end), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(t, Op::Transpose(x), rg)
    }

    /// Row-wise Jensen-Shannon divergence (natural log) between two tensors
    /// whose rows are probability distributions: `R x C -> R x 1`.
    pub fn jsd_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() {
            return Err(shape_err("jsd_rows", tp, tq));
        }
        let c = tp.cols();
        let out: Vec<f64> = tp
            .values()
            .chunks(c)
            .zip(tq.values().chunks(c))
            .map(|(pr, qr)| jsd_row(pr, qr))
            .collect();
        let rows = out.len();
        let rg = self.rg(p) || self.rg(q);
        let t = Tensor::new(&[rows, 1], out)?;
        Ok(self.push(t, Op::Jsd(p, q), rg))
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn sq_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        Ok(self.sum(d2))
    }

    /// Affine map `x * w + b` with `w: in x out` and `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalar(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            // only leaves are read back; freeing the rest lets buffers recycle
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            bound: self.bound.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC * B^T ; dB = A^T * dC
                acc(*a, &mut |s| gemm_into(g, tb.values(), s, m, n, k, false, true, 1.0));
                acc(*b, &mut |s| gemm_into(ta.values(), g, s, k, m, n, true, false, 1.0));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // C = A B^T ; dA = dC * B ; dB = dC^T * A
                acc(*a, &mut |s| gemm_into(g, tb.values(), s, m, n, k, false, false, 1.0));
                acc(*b, &mut |s| gemm_into(g, ta.values(), s, n, m, k, true, false, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((o, gi), bi) in s.iter_mut().zip(g).zip(tb.values()) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, gi), ai) in s.iter_mut().zip(g).zip(ta.values()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = y.cols();
                acc(*x, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| {
                    for row in g.chunks(c) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::MulCol(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let c = tx.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), &wi) in s.chunks_mut(c).zip(g.chunks(c)).zip(tw.values()) {
                        axpy(srow, grow, wi);
                    }
                });
                acc(*w, &mut |s| {
                    for ((o, grow), xrow) in s.iter_mut().zip(g.chunks(c)).zip(tx.values().chunks(c)) {
                        *o += dot(grow, xrow);
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |s| axpy(s, g, *k)),
            Op::AddScalar(x) => acc(*x, &mut |s| axpy(s, g, 1.0)),
            Op::Relu(x) => {
                let tx = val(*x);
                acc(*x, &mut |s| {
                    for ((o, gi), xi) in s.iter_mut().zip(g).zip(tx.values()) {
                        *o += if *xi > 0.0 { *gi } else { 0.0 };
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let tx = val(*x);
                acc(*x, &mut |s| {
                    for ((o, gi), xi) in s.iter_mut().zip(g).zip(tx.values()) {
                        *o += if *xi > 0.0 { *gi } else { slope * gi };
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |s| {
                for ((o, gi), yi) in s.iter_mut().zip(g).zip(y.values()) {
                    *o += gi * yi;
                }
            }),
            Op::Log(x) => {
                let tx = val(*x);
                acc(*x, &mut |s| {
                    for ((o, gi), xi) in s.iter_mut().zip(g).zip(tx.values()) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Softmax(x) => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.values().chunks(c)) {
                        let gy = dot(grow, yrow);
                        for ((o, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - gy);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.values().chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((o, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let total = y.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).cols();
                    acc(x, &mut |s| {
                        for (srow, grow) in s.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(srow, &grow[offset..offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SumAll(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::MeanAll(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumRows(x) => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for srow in s.chunks_mut(c) {
                        axpy(srow, g, 1.0);
                    }
                });
            }
            Op::SumLast(x) => {
                let c = val(*x).cols();
                acc(*x, &mut |s| {
                    for (srow, gi) in s.chunks_mut(c).zip(g) {
                        srow.iter_mut().for_each(|o| *o += gi);
                    }
                });
            }
            Op::GroupSumRows(x, group) => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for (i, srow) in s.chunks_mut(c).enumerate() {
                        axpy(srow, &g[(i / group) * c..(i / group + 1) * c], 1.0);
                    }
                });
            }
            Op::L2Normalize(x, norms) => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for (((srow, grow), yrow), n) in
                        s.chunks_mut(c).zip(g.chunks(c)).zip(y.values().chunks(c)).zip(norms)
                    {
                        let gy = dot(grow, yrow);
                        for ((o, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gi - yi * gy) / n;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = y.cols();
                acc(*x, &mut |s| {
                    for (&i, grow) in idx.iter().zip(g.chunks(c)) {
                        axpy(&mut s[i * c..(i + 1) * c], grow, 1.0);
                    }
                });
            }
            Op::GatherFlat(x, idx) => acc(*x, &mut |s| {
                for (&i, gi) in idx.iter().zip(g) {
                    s[i] += gi;
                }
            }),
            Op::SliceRows(x, start, end) => {
                let c = y.cols();
                acc(*x, &mut |s| axpy(&mut s[start * c..end * c], g, 1.0));
            }
            Op::Reshape(x) => acc(*x, &mut |s| axpy(s, g, 1.0)),
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Jsd(p, q) => {
                let (tp, tq) = (val(*p), val(*q));
                let c = tp.cols();
                // d/dp_i = 0.5 ln(p_i / m_i), with m = (p + q) / 2
                let half_log_ratio = |a: f64, b: f64| {
                    let m = 0.5 * (a + b);
                    0.5 * (a.max(f64::MIN_POSITIVE) / m.max(f64::MIN_POSITIVE)).ln()
                };
                acc(*p, &mut |s| {
                    for (r, gi) in g.iter().enumerate() {
                        for k in 0..c {
                            let (a, b) = (tp.values()[r * c + k], tq.values()[r * c + k]);
                            s[r * c + k] += gi * half_log_ratio(a, b);
                        }
                    }
                });
                acc(*q, &mut |s| {
                    for (r, gi) in g.iter().enumerate() {
                        for k in 0..c {
                            let (a, b) = (tp.values()[r * c + k], tq.values()[r * c + k]);
                            s[r * c + k] += gi * half_log_ratio(b, a);
                        }
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.values().to_vec();
    for row in out.chunks_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(t.shape(), out).expect("softmax shape")
}

/// JSD of two distributions with the `0 * ln(0 / x) = 0` convention.
pub(crate) fn jsd_row(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * term(a, m) + 0.5 * term(b, m)
        })
        .sum()
}
