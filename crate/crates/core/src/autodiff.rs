//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in creation order, so a node's parents
//! always precede it. [`Tape::backward`] walks the record in reverse and
//! accumulates vector-Jacobian products into every reachable leaf that was
//! registered with `requires_grad`.
//!
//! Elementwise binary ops broadcast their right operand in two ways only: a
//! right operand shaped like the left one without its leading (batch) axis is
//! repeated over every row, and a one-element right operand is repeated over
//! every value.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Vector norms at or below this value are rejected rather than clamped.
pub const EPS_NORM: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row(usize),
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let numel_b: usize = b.iter().product();
        if a == b {
            Ok(Bcast::Same)
        } else if a.len() == b.len() + 1 && &a[1..] == b {
            Ok(Bcast::Row(numel_b))
        } else if numel_b == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            })
        }
    }

    #[inline]
    fn index(self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Row(n) => k % n,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowDot(Var, Var),
    Normalize { x: Var, norms: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    SegmentSum { x: Var, segment: Vec<usize> },
    GradReverse(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the leaf was not
    /// reached by the backward pass.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. It is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Registers a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Registers a constant leaf regardless of the tensor's flag.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = Bcast::resolve(name, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, bd[bc.index(k)]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b, bc), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b, bc), n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b, bc), n))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let (t, bc) = self.binary("div", a, b, |x, y| x / y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Div(a, b, bc), n))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let t = transpose_raw(ta);
        let n = self.needs(a);
        Ok(self.push(t, Op::Transpose(a), n))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), n))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| -x);
        let n = self.needs(a);
        self.push(t, Op::Neg(a), n)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x * c);
        let n = self.needs(a);
        self.push(t, Op::Scale(a, c), n)
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x + c);
        let n = self.needs(a);
        self.push(t, Op::Offset(a), n)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        let n = self.needs(a);
        self.push(t, Op::Exp(a), n)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                value: bad,
            });
        }
        let t = self.unary(a, f64::ln);
        let n = self.needs(a);
        Ok(self.push(t, Op::Log(a), n))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        let n = self.needs(a);
        self.push(t, Op::Abs(a), n)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        let n = self.needs(a);
        self.push(t, Op::Tanh(a), n)
    }

    /// Sum of all values, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let n = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), n)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::InsufficientData("mean of an empty tensor".into()));
        }
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let n = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), n))
    }

    /// Sums each row of a `[m, n]` matrix into a `[m]` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let data = (0..ta.rows()).map(|i| ta.row(i).iter().sum()).collect();
        let n = self.needs(a);
        Ok(self.push(Tensor::vector(data), Op::SumRows(a), n))
    }

    /// Row-wise inner products of two `[m, n]` matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_dot",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = (0..ta.rows())
            .map(|i| dot(ta.row(i), tb.row(i)))
            .collect();
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::vector(data), Op::RowDot(a, b), n))
    }

    /// Scales a vector, or every row of a matrix, to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() || ta.shape().len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let width = ta.cols();
        let groups = ta.numel() / width.max(1);
        let mut out = ta.data().to_vec();
        let mut norms = Vec::with_capacity(groups);
        for g in 0..groups {
            let chunk = &mut out[g * width..(g + 1) * width];
            let norm = dot(chunk, chunk).sqrt();
            if !(norm > EPS_NORM) {
                return Err(Error::NearZeroNorm { norm });
            }
            chunk.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let n = self.needs(a);
        Ok(self.push(t, Op::Normalize { x: a, norms }, n))
    }

    /// Selects entries along the leading axis; indices may repeat.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rows = ta.rows();
        if ta.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: vec![],
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: ta.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let w = ta.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(ta.row(i));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, data)?;
        let n = self.needs(a);
        Ok(self.push(
            t,
            Op::Gather {
                x: a,
                index: index.to_vec(),
            },
            n,
        ))
    }

    /// Sums entries along the leading axis into `segments` buckets, where
    /// entry `k` goes to bucket `segment[k]`.
    pub fn segment_sum(&mut self, a: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() || segment.len() != ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                lhs: ta.shape().to_vec(),
                rhs: vec![segment.len()],
            });
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= segments) {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                lhs: vec![segments],
                rhs: vec![bad],
            });
        }
        let w = ta.row_len();
        let mut shape = ta.shape().to_vec();
        shape[0] = segments;
        let mut out = Tensor::zeros(&shape);
        for (k, &s) in segment.iter().enumerate() {
            let src = ta.row(k);
            for (o, v) in out.row_mut(s).iter_mut().zip(src) {
                *o += v;
            }
        }
        debug_assert_eq!(out.row_len(), w);
        let n = self.needs(a);
        Ok(self.push(
            out,
            Op::SegmentSum {
                x: a,
                segment: segment.to_vec(),
            },
            n,
        ))
    }

    /// Identity on the forward pass; scales the incoming gradient by
    /// `-lambda` on the backward pass.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::config("lambda_grl", "must be >= 0"));
        }
        let t = self.value(a).clone();
        let n = self.needs(a);
        Ok(self.push(t, Op::GradReverse(a, lambda), n))
    }

    /// Cosine similarity of two vectors, as a scalar.
    pub fn cosine_sim(&mut self, u: Var, w: Var) -> Result<Var> {
        let (su, sw) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if su.len() != 1 || su != sw {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: su,
                rhs: sw,
            });
        }
        let nu = self.l2_normalize(u)?;
        let nw = self.l2_normalize(w)?;
        let p = self.mul(nu, nw)?;
        Ok(self.sum(p))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: lt.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // keep leaves only; intermediate grads are dropped once consumed
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if i <= loss.0 && matches!(n.op, Op::Leaf) && n.needs_grad {
                    grads[i].take()
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.accum(grads, *a, || gd.to_vec());
                self.accum_bcast(grads, *b, *bc, gd, |_, gk| gk);
            }
            Op::Sub(a, b, bc) => {
                self.accum(grads, *a, || gd.to_vec());
                self.accum_bcast(grads, *b, *bc, gd, |_, gk| -gk);
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || {
                    gd.iter()
                        .enumerate()
                        .map(|(k, gk)| gk * vb[bc.index(k)])
                        .collect()
                });
                self.accum_bcast(grads, *b, *bc, gd, |k, gk| gk * va[k]);
            }
            Op::Div(a, b, bc) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || {
                    gd.iter()
                        .enumerate()
                        .map(|(k, gk)| gk / vb[bc.index(k)])
                        .collect()
                });
                self.accum_bcast(grads, *b, *bc, gd, |k, gk| {
                    let y = vb[bc.index(k)];
                    -gk * va[k] / (y * y)
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = G Bᵀ, dB = Aᵀ G
                self.accum(grads, *a, || {
                    let bt = transpose_raw(tb);
                    matmul_raw(gd, bt.data(), m, n, k)
                });
                self.accum(grads, *b, || {
                    let at = transpose_raw(ta);
                    matmul_raw(at.data(), gd, k, m, n)
                });
            }
            Op::Transpose(a) => {
                self.accum(grads, *a, || transpose_raw(g).into_data());
            }
            Op::Reshape(a) => self.accum(grads, *a, || gd.to_vec()),
            Op::Neg(a) => self.accum(grads, *a, || gd.iter().map(|v| -v).collect()),
            Op::Scale(a, c) => self.accum(grads, *a, || gd.iter().map(|v| v * c).collect()),
            Op::Offset(a) => self.accum(grads, *a, || gd.to_vec()),
            Op::Exp(a) => {
                let out = node.value.data();
                self.accum(grads, *a, || gd.iter().zip(out).map(|(g, y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accum(grads, *a, || gd.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                // subgradient 0 at the kink
                self.accum(grads, *a, || {
                    gd.iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accum(grads, *a, || {
                    gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, || vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, || vec![gd[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let w = ta.cols();
                self.accum(grads, *a, || {
                    (0..ta.numel()).map(|k| gd[k / w]).collect()
                });
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let w = ta.cols();
                self.accum(grads, *a, || {
                    tb.data()
                        .iter()
                        .enumerate()
                        .map(|(k, y)| gd[k / w] * y)
                        .collect()
                });
                self.accum(grads, *b, || {
                    ta.data()
                        .iter()
                        .enumerate()
                        .map(|(k, x)| gd[k / w] * x)
                        .collect()
                });
            }
            Op::Normalize { x, norms } => {
                let u = node.value.data();
                let w = node.value.cols();
                // (I - u uᵀ) g / ‖v‖ per row
                self.accum(grads, *x, || {
                    let mut out = vec![0.0; u.len()];
                    for (r, norm) in norms.iter().enumerate() {
                        let span = r * w..(r + 1) * w;
                        let (ur, gr) = (&u[span.clone()], &gd[span.clone()]);
                        let proj = dot(ur, gr);
                        for ((o, ui), gi) in out[span].iter_mut().zip(ur).zip(gr) {
                            *o = (gi - ui * proj) / norm;
                        }
                    }
                    out
                });
            }
            Op::Gather { x, index } => {
                let tx = self.value(*x);
                let w = tx.row_len();
                self.accum(grads, *x, || {
                    let mut out = vec![0.0; tx.numel()];
                    for (k, &i) in index.iter().enumerate() {
                        for c in 0..w {
                            out[i * w + c] += gd[k * w + c];
                        }
                    }
                    out
                });
            }
            Op::SegmentSum { x, segment } => {
                let w = g.row_len();
                self.accum(grads, *x, || {
                    let mut out = Vec::with_capacity(segment.len() * w);
                    for &s in segment {
                        out.extend_from_slice(&gd[s * w..(s + 1) * w]);
                    }
                    out
                });
            }
            Op::GradReverse(a, lambda) => {
                self.accum(grads, *a, || gd.iter().map(|v| -lambda * v).collect());
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let contrib = make();
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(&contrib) {
                    *a += c;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, contrib).expect("gradient shape"));
            }
        }
    }

    fn accum_bcast(
        &self,
        grads: &mut [Option<Tensor>],
        b: Var,
        bc: Bcast,
        gd: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let nb = self.value(b).numel();
        self.accum(grads, b, || {
            let mut out = vec![0.0; nb];
            for (k, &gk) in gd.iter().enumerate() {
                out[bc.index(k)] += f(k, gk);
            }
            out
        });
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::matrix(n, m, out).expect("transpose shape")
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`
/// over every entry of every leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::config("eps", "must lie in (0, 1e-3]"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.item(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check perturbation".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.item(out).is_finite() {
        return Err(Error::NonFinite("grad_check base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[li], leaf);
        for k in 0..leaf.numel() {
            let orig = leaf.data()[k];
            inputs[li].data_mut()[k] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[li].data_mut()[k] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[li].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
