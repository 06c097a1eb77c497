//! Wengert-list reverse mode over dense `f64` tensors.
//!
//! Every operation appends a node holding its output value and the
//! references it needs for the backward rule. Nodes are pushed in
//! execution order, so the list is already topologically sorted and
//! `backward` simply walks it in reverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise unary functions with a closed-form derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    /// `ln(max(x, floor))`; zero gradient below the floor.
    LogFloor(f64),
    Recip,
    Square,
    Relu,
    Silu,
    Tanh,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Shift(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    MulCol(Var, Var),
    ReduceAll(Var, Reduce),
    ReduceAxis(Var, Reduce, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SoftCrossEntropyRows(Var, Vec<f64>),
    PairwiseSqDist(Var, Var),
    Grl(Var, f64),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    Column(Var, usize),
    Reshape(Var),
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one root with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v` as a tensor, zero when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
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

    /// Records a trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let t = Tensor::new(value.shape().to_vec(), value.data().to_vec()).expect("valid tensor");
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let x = self.value(a);
        if let Unary::Log = f {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        if let Unary::LogFloor(floor) = f {
            if floor <= 0.0 {
                return Err(Error::Domain(format!("log floor {floor} must be positive")));
            }
        }
        let data: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| match f {
                Unary::Neg => -v,
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::LogFloor(floor) => v.max(floor).ln(),
                Unary::Recip => 1.0 / v,
                Unary::Square => v * v,
                Unary::Relu => v.max(0.0),
                Unary::Silu => v * sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Scale(c) => c * v,
                Unary::Shift(c) => v + c,
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unary(a, f), rg))
    }

    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "{f:?} of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| match f {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(a, b, f), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::Scale(c))
    }

    /// `a[m×k] · b[k×n]`; 1-D operands are treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(
                "mul_scalar needs a 1-element factor".into(),
            ));
        }
        let c = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    /// Scales row `i` of `a[m×n]` by `c[i]`, where `c` has `m` entries.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(c).len() != m {
            return Err(Error::Dimension(format!(
                "row scale of length {} for {m} rows",
                self.value(c).len()
            )));
        }
        let cv = self.value(c).data();
        let mut data = self.value(a).data().to_vec();
        for (row, &f) in data.chunks_mut(n).zip(cv) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(out, Op::MulCol(a, c), rg))
    }

    /// Reduction over every entry; the result has shape `[1]`.
    pub fn reduce(&mut self, a: Var, how: Reduce) -> Result<Var> {
        let x = self.value(a);
        let total: f64 = x.data().iter().sum();
        let v = match how {
            Reduce::Sum => total,
            Reduce::Mean => total / x.len() as f64,
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::ReduceAll(a, how), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduce::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduce::Mean)
    }

    /// Reduction of a 2-D tensor along `axis` (0 collapses rows, 1 collapses columns).
    pub fn reduce_axis(&mut self, a: Var, how: Reduce, axis: usize) -> Result<Var> {
        if self.shape(a).len() != 2 || axis > 1 {
            return Err(Error::Dimension(format!(
                "axis {axis} invalid for shape {:?}",
                self.shape(a)
            )));
        }
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let (len, count) = if axis == 0 { (n, m) } else { (m, n) };
        let mut out = vec![0.0; len];
        for i in 0..m {
            for j in 0..n {
                out[if axis == 0 { j } else { i }] += x[i * n + j];
            }
        }
        if how == Reduce::Mean {
            out.iter_mut().for_each(|v| *v /= count as f64);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::ReduceAxis(a, how, axis), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, n) = x.dims2()?;
        if !x.is_finite() {
            return Err(Error::Domain("softmax of non-finite input".into()));
        }
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, n) = x.dims2()?;
        if !x.is_finite() {
            return Err(Error::Domain("log-softmax of non-finite input".into()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmaxRows(a), rg))
    }

    /// Per-row cross-entropy `−Σ_c t_c·log softmax(s)_c` fused from logits.
    ///
    /// `targets` is a row-major `m×n` array of (possibly soft) labels.
    pub fn soft_cross_entropy_rows(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let x = self.value(logits);
        let (m, n) = x.dims2()?;
        if targets.len() != m * n {
            return Err(Error::Dimension(format!(
                "{} targets for {m}×{n} logits",
                targets.len()
            )));
        }
        let out: Vec<f64> = x
            .data()
            .chunks(n)
            .zip(targets.chunks(n))
            .map(|(row, t)| {
                let lse = log_sum_exp(row);
                -row.iter().zip(t).map(|(s, tc)| tc * (s - lse)).sum::<f64>()
            })
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(out),
            Op::SoftCrossEntropyRows(logits, targets),
            rg,
        ))
    }

    /// Squared Euclidean distances between rows of `v[b×d]` and rows of `e[k×d]`.
    pub fn pairwise_sq_dist(&mut self, v: Var, e: Var) -> Result<Var> {
        let (b, d) = self.value(v).dims2()?;
        let (k, d2) = self.value(e).dims2()?;
        if d != d2 {
            return Err(Error::Dimension(format!(
                "point dimension {d} vs anchor dimension {d2}"
            )));
        }
        let (vs, es) = (self.value(v).data(), self.value(e).data());
        let mut out = Vec::with_capacity(b * k);
        for i in 0..b {
            let vi = &vs[i * d..(i + 1) * d];
            for j in 0..k {
                let ej = &es[j * d..(j + 1) * d];
                out.push(vi.iter().zip(ej).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let out = Tensor::new(vec![b, k], out)?;
        let rg = self.rg(v) || self.rg(e);
        Ok(self.push(out, Op::PairwiseSqDist(v, e), rg))
    }

    /// Gradient reversal: identity forward, `−λ·g` backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Contract(format!("GRL lambda {lambda} must be >= 0")));
        }
        let out = self.value(a).clone();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Grl(a, lambda), rg))
    }

    /// Copies `shape.product()` consecutive entries of the flattened `a`
    /// starting at `offset` into a new tensor of the given shape.
    pub fn slice(&mut self, a: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let x = self.value(a);
        if offset + n > x.len() {
            return Err(Error::Dimension(format!(
                "slice {offset}..{} of length-{} tensor",
                offset + n,
                x.len()
            )));
        }
        let out = Tensor::new(shape, x.data()[offset..offset + n].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice(a, offset), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2()?;
        if rows.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Dimension(format!("row {bad} out of {m}")));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(x.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Column `j` of `a[m×n]` as an `m`-vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if j >= n {
            return Err(Error::Dimension(format!("column {j} out of {n}")));
        }
        let x = self.value(a).data();
        let out: Vec<f64> = (0..m).map(|i| x[i * n + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Column(a, j), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let (_, n) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n2) = self.value(p).dims2()?;
            if n2 != n {
                return Err(Error::Dimension(format!("concat of widths {n} and {n2}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::Unary(a, f) => {
                let x = nodes[a.0].value.data();
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        let v = x[i];
                        let d = match f {
                            Unary::Neg => -1.0,
                            Unary::Exp => out[i],
                            Unary::Log => 1.0 / v,
                            Unary::LogFloor(floor) => {
                                if v > floor {
                                    1.0 / v
                                } else {
                                    0.0
                                }
                            }
                            Unary::Recip => -out[i] * out[i],
                            Unary::Square => 2.0 * v,
                            Unary::Relu => {
                                if v > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Silu => {
                                let s = sigmoid(v);
                                s * (1.0 + v * (1.0 - s))
                            }
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Scale(c) => c,
                            Unary::Shift(_) => 1.0,
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            &Op::Binary(a, b, f) => {
                let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += match f {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * y[i],
                        };
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += match f {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * x[i],
                        };
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().1;
                let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(a, &mut |ga| gemm_nt(g, y, ga, m, k, n));
                acc(b, &mut |gb| gemm_tn(x, g, gb, m, k, n));
            }
            &Op::AddRow(a, bias) => {
                let n = nodes[bias.0].value.len();
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(bias, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            &Op::MulScalar(a, s) => {
                let c = nodes[s.0].value.data()[0];
                let x = nodes[a.0].value.data();
                acc(a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q * c)
                });
                acc(s, &mut |gs| {
                    gs[0] += g.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()
                });
            }
            &Op::MulCol(a, c) => {
                let (_, n) = nodes[a.0].value.dims2().unwrap();
                let x = nodes[a.0].value.data();
                let cv = nodes[c.0].value.data();
                acc(a, &mut |ga| {
                    for (i, &f) in cv.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * f;
                        }
                    }
                });
                acc(c, &mut |gc| {
                    for (i, slot) in gc.iter_mut().enumerate() {
                        *slot += (0..n).map(|j| g[i * n + j] * x[i * n + j]).sum::<f64>();
                    }
                });
            }
            &Op::ReduceAll(a, how) => {
                let n = nodes[a.0].value.len();
                let d = match how {
                    Reduce::Sum => g[0],
                    Reduce::Mean => g[0] / n as f64,
                };
                acc(a, &mut |ga| ga.iter_mut().for_each(|p| *p += d));
            }
            &Op::ReduceAxis(a, how, axis) => {
                let (m, n) = nodes[a.0].value.dims2().unwrap();
                let count = if axis == 0 { m } else { n } as f64;
                let scale = if how == Reduce::Mean {
                    1.0 / count
                } else {
                    1.0
                };
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += scale * g[if axis == 0 { j } else { i }];
                        }
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let (_, n) = node.value.dims2().unwrap();
                acc(a, &mut |ga| {
                    for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                let (_, n) = node.value.dims2().unwrap();
                acc(a, &mut |ga| {
                    for ((gr, lr), dr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] += gr[j] - lr[j].exp() * total;
                        }
                    }
                });
            }
            Op::SoftCrossEntropyRows(a, targets) => {
                let a = *a;
                let (_, n) = nodes[a.0].value.dims2().unwrap();
                let x = nodes[a.0].value.data();
                let mut p = vec![0.0; n];
                acc(a, &mut |ga| {
                    for (i, (row, t)) in x.chunks(n).zip(targets.chunks(n)).enumerate() {
                        softmax_row(row, &mut p);
                        let mass: f64 = t.iter().sum();
                        for j in 0..n {
                            ga[i * n + j] += g[i] * (mass * p[j] - t[j]);
                        }
                    }
                });
            }
            &Op::PairwiseSqDist(v, e) => {
                let (b, d) = nodes[v.0].value.dims2().unwrap();
                let (k, _) = nodes[e.0].value.dims2().unwrap();
                let (vs, es) = (nodes[v.0].value.data(), nodes[e.0].value.data());
                acc(v, &mut |gv| {
                    for i in 0..b {
                        for j in 0..k {
                            let w = 2.0 * g[i * k + j];
                            for c in 0..d {
                                gv[i * d + c] += w * (vs[i * d + c] - es[j * d + c]);
                            }
                        }
                    }
                });
                acc(e, &mut |ge| {
                    for i in 0..b {
                        for j in 0..k {
                            let w = 2.0 * g[i * k + j];
                            for c in 0..d {
                                ge[j * d + c] -= w * (vs[i * d + c] - es[j * d + c]);
                            }
                        }
                    }
                });
            }
            &Op::Grl(a, lambda) => {
                acc(a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += -lambda * q)
                });
            }
            &Op::Slice(a, offset) => {
                acc(a, &mut |ga| {
                    ga[offset..offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(p, q)| *p += q)
                });
            }
            Op::GatherRows(a, rows) => {
                let a = *a;
                let (_, n) = nodes[a.0].value.dims2().unwrap();
                acc(a, &mut |ga| {
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            &Op::Column(a, j) => {
                let (_, n) = nodes[a.0].value.dims2().unwrap();
                acc(a, &mut |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i * n + j] += gi;
                    }
                });
            }
            &Op::Reshape(a) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |gp| {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut p = at.to_vec();
                let mut m = at.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn matmul_values() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[2.0, 3.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let a0 = [1.0, 2.0, 3.0, 4.0];
        let f = |a: &[f64]| (a[0] + a[1]) + (a[2] + a[3]);
        // sum(A·[[1],[1]]), computed by hand above
        let numeric = central_diff(f, &a0, 1e-6);

        let mut t = Tape::new();
        let a = t.param(&Tensor::new(vec![2, 2], a0.to_vec()).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        let analytic = g.get(a).unwrap();
        assert_eq!(analytic, &[1.0, 1.0, 1.0, 1.0]);
        for (x, y) in analytic.iter().zip(&numeric) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn pointwise_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 2.0, 0.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = t.silu(x).unwrap();
        assert_eq!(t.value(s).data()[2], 0.0);
    }

    #[test]
    fn silu_derivative_at_one() {
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let numeric = (silu(1.0 + 1e-6) - silu(1.0 - 1e-6)) / 2e-6;
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(1.0));
        let y = t.silu(x).unwrap();
        let g = t.backward(y).unwrap();
        assert!((g.get(x).unwrap()[0] - numeric).abs() < 1e-6);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
        let x = t.constant(Tensor::vector(vec![-2.0]));
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let p = t.softmax_rows(x).unwrap();
        for &v in t.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = t.softmax_rows(x).unwrap();
        for (v, e) in t.value(p).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.3, 1.0, 1.7]));
        let b = t.constant(Tensor::vector(vec![100.3, 101.0, 101.7]));
        let (pa, pb) = (t.softmax_rows(a).unwrap(), t.softmax_rows(b).unwrap());
        for (x, y) in t.value(pa).data().iter().zip(t.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x).unwrap();
        assert_eq!(t.value(s).data(), &[6.0]);
        let c = t.constant(Tensor::filled(&[2, 3], 4.5));
        let m = t.mean(c).unwrap();
        assert_eq!(t.value(m).data(), &[4.5]);

        let ab = t.param(&Tensor::vector(vec![7.0, -2.0]));
        let m = t.mean(ab).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(ab).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn reduce_axis_bad_axis() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            t.reduce_axis(x, Reduce::Sum, 2),
            Err(Error::Dimension(_))
        ));
        let x = t.constant(Tensor::zeros(&[4]));
        assert!(matches!(
            t.reduce_axis(x, Reduce::Sum, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_root_gives_ones_and_unreachable_is_zero() {
        let mut t = Tape::new();
        let p = t.param(&Tensor::vector(vec![0.1, -0.2, 0.3]));
        let q = t.param(&Tensor::vector(vec![5.0]));
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(g.get(q).is_none());
        assert_eq!(g.wrt(q).data(), &[0.0]);
    }

    #[test]
    fn mse_at_target_has_zero_grad() {
        let mut t = Tape::new();
        let p = t.param(&Tensor::vector(vec![0.5, 1.5]));
        let y = t.constant(Tensor::vector(vec![0.5, 1.5]));
        let d = t.sub(p, y).unwrap();
        let sq = t.square(d).unwrap();
        let l = t.mean(sq).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grl_identity_forward_and_scaled_backward() {
        let mut t = Tape::new();
        let v = t.param(&Tensor::vector(vec![0.25, -3.0, 1e-300]));
        let r = t.grl(v, 0.5).unwrap();
        assert_eq!(t.value(r).data(), t.value(v).data());
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[-0.5, -0.5, -0.5]);

        let mut t = Tape::new();
        let v = t.param(&Tensor::vector(vec![1.0, 2.0]));
        let r = t.grl(v, 0.0).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(v).unwrap().iter().all(|&x| x == 0.0));
        assert!(t.grl(v, -1.0).is_err());
    }

    /// Every op composed into one scalar, checked against central differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let x0: Vec<f64> = vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9];
        let e0: Vec<f64> = vec![0.5, 0.1, -0.3, 0.8];

        let build = |t: &mut Tape, x: Var, e: Var| -> Var {
            let w = t.reshape(x, vec![3, 2]).unwrap();
            let em = t.reshape(e, vec![2, 2]).unwrap();
            let h = t.matmul(w, em).unwrap();
            let b = t.slice(e, 1, vec![2]).unwrap();
            let h = t.add_row(h, b).unwrap();
            let h = t.silu(h).unwrap();
            let d = t.pairwise_sq_dist(h, em).unwrap();
            let d = t.unary(d, Unary::Shift(1e-3)).unwrap();
            let s = t.log(d).unwrap();
            let s = t.neg(s).unwrap();
            let p = t.softmax_rows(s).unwrap();
            let lp = t.unary(p, Unary::LogFloor(1e-12)).unwrap();
            let ent = t.mul(p, lp).unwrap();
            let col = t.column(p, 1).unwrap();
            let scaled = t.mul_col(h, col).unwrap();
            let g = t.gather_rows(scaled, &[2, 0, 2]).unwrap();
            let ce = t
                .soft_cross_entropy_rows(g, vec![0.2, 0.8, 1.0, 0.0, 0.5, 0.5])
                .unwrap();
            let imp = t.reduce_axis(p, Reduce::Sum, 0).unwrap();
            let tot = t.sum(imp).unwrap();
            let inv = t.unary(tot, Unary::Recip).unwrap();
            let pn = t.mul_scalar(imp, inv).unwrap();
            let lsm = t.log_softmax_rows(pn).unwrap();
            let cat = t.concat_rows(&[lsm, lsm]).unwrap();
            let th = t.unary(cat, Unary::Tanh).unwrap();
            let ma = t.reduce_axis(ent, Reduce::Mean, 1).unwrap();
            let parts = [
                t.sum(ma).unwrap(),
                t.mean(ce).unwrap(),
                t.sum(th).unwrap(),
                t.sum(g).unwrap(),
            ];
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = t.add(acc, p).unwrap();
            }
            acc
        };

        let eval = |xv: &[f64], ev: &[f64]| {
            let mut t = Tape::new();
            let x = t.param(&Tensor::vector(xv.to_vec()));
            let e = t.param(&Tensor::vector(ev.to_vec()));
            let r = build(&mut t, x, e);
            t.value(r).data()[0]
        };

        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(x0.clone()));
        let e = t.param(&Tensor::vector(e0.clone()));
        let r = build(&mut t, x, e);
        let g = t.backward(r).unwrap();

        let numeric_x = central_diff(|v| eval(v, &e0), &x0, 1e-6);
        let numeric_e = central_diff(|v| eval(&x0, v), &e0, 1e-6);
        for (analytic, numeric) in [
            (g.get(x).unwrap(), numeric_x),
            (g.get(e).unwrap(), numeric_e),
        ] {
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel < 1e-6, "analytic {a} vs numeric {n}");
            }
        }
    }
}
