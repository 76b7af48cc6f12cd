//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of a forward pass as a node. Parameter
//! leaves borrow their values from a [`ParamStore`] instead of copying them.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for the
//! trainable parameters the loss depends on.

use rand::Rng;

use super::params::{GradRecord, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{dropout_mask, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRows(Var, Var),
    MulRows(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    MatMulNT(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    Stack(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    Dot(Var, Var),
    SqNorm(Var),
    Norm(Var),
    RowSqNorms(Var),
    Pick(Var, usize),
    AddN(Vec<Var>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A recorded forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn vector_len(op: &'static str, t: &Tensor) -> Result<usize> {
    if t.shape().len() != 1 {
        return Err(Error::shape(op, format!("expected a vector, got {:?}", t.shape())));
    }
    Ok(t.len())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

pub(crate) fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param_id(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param_id(id))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * k).collect())
            .expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        check_same("mul_const", ta, c)?;
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst(a, c.data().to_vec()), ng))
    }

    /// Inverted dropout; the identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        match dropout_mask(self.shape(a), rate, training, rng)? {
            None => Ok(a),
            Some(mask) => self.mul_const(a, &mask),
        }
    }

    fn row_broadcast(&mut self, name: &'static str, m: Var, v: Var, mul: bool) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (r, c) = matrix_dims(name, tm)?;
        if vector_len(name, tv)? != c {
            return Err(Error::shape(name, format!("{:?} with {:?}", tm.shape(), tv.shape())));
        }
        let mut data = tm.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, y) in row.iter_mut().zip(tv.data()) {
                if mul {
                    *x *= y
                } else {
                    *x += y
                }
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        let ng = self.ng(m) || self.ng(v);
        let op = if mul { Op::MulRows(m, v) } else { Op::AddRows(m, v) };
        Ok(self.push(t, op, ng))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        self.row_broadcast("add_rows", m, v, false)
    }

    /// Multiplies every row of matrix `m` element-wise by vector `v`.
    pub fn mul_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        self.row_broadcast("mul_rows", m, v, true)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `m · x` for `m: [r, c]`, `x: [c]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (tm, tx) = (self.value(m), self.value(x));
        let (r, c) = matrix_dims("matvec", tm)?;
        if vector_len("matvec", tx)? != c {
            return Err(Error::shape("matvec", format!("{:?} · {:?}", tm.shape(), tx.shape())));
        }
        let xs = tx.data();
        let data = tm.data().chunks_exact(c).map(|row| dot(row, xs)).collect();
        let t = Tensor::new(vec![r], data)?;
        let ng = self.ng(m) || self.ng(x);
        Ok(self.push(t, Op::MatVec(m, x), ng))
    }

    /// `mᵀ · y` for `m: [r, c]`, `y: [r]`; a weighted sum of the rows of `m`.
    pub fn matvec_t(&mut self, m: Var, y: Var) -> Result<Var> {
        let (tm, ty) = (self.value(m), self.value(y));
        let (r, c) = matrix_dims("matvec_t", tm)?;
        if vector_len("matvec_t", ty)? != r {
            return Err(Error::shape("matvec_t", format!("{:?}ᵀ · {:?}", tm.shape(), ty.shape())));
        }
        let mut out = vec![0.0; c];
        for (row, &w) in tm.data().chunks_exact(c).zip(ty.data()) {
            axpy(w, row, &mut out);
        }
        let t = Tensor::new(vec![c], out)?;
        let ng = self.ng(m) || self.ng(y);
        Ok(self.push(t, Op::MatVecT(m, y), ng))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul_nt", ta)?;
        let (n, k2) = matrix_dims("matmul_nt", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{:?} · {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let mut out = Vec::with_capacity(m * n);
        for ra in ta.data().chunks_exact(k) {
            for rb in tb.data().chunks_exact(k) {
                out.push(dot(ra, rb));
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMulNT(a, b), ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        vector_len("softmax", ta)?;
        let t = Tensor::vector(softmax_slice(ta.data()));
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        vector_len("log_softmax", ta)?;
        let t = Tensor::vector(log_softmax_slice(ta.data()));
        let ng = self.ng(a);
        Ok(self.push(t, Op::LogSoftmax(a), ng))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            vector_len("concat", t)?;
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng))
    }

    /// `len` entries of a vector starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = vector_len("slice", ta)?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice", format!("[{start}, {}) of {n}", start + len)));
        }
        let t = Tensor::vector(ta.data()[start..start + len].to_vec());
        let ng = self.ng(a);
        Ok(self.push(t, Op::Slice(a, start), ng))
    }

    /// Row `i` of a matrix (embedding lookup).
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let tm = self.value(m);
        let (r, _) = matrix_dims("row", tm)?;
        if i >= r {
            return Err(Error::OutOfVocab { id: i, size: r });
        }
        let t = Tensor::vector(tm.row(i).to_vec());
        let ng = self.ng(m);
        Ok(self.push(t, Op::Row(m, i), ng))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::Empty("stack"))?;
        let c = vector_len("stack", self.value(first))?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [c] {
                return Err(Error::shape("stack", format!("row {:?} vs [{c}]", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(t, Op::Stack(rows.to_vec()), ng))
    }

    /// Column-wise mean of a matrix.
    pub fn mean_rows(&mut self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        let (r, c) = matrix_dims("mean_rows", tm)?;
        let mut out = vec![0.0; c];
        for row in tm.data().chunks_exact(c) {
            axpy(1.0, row, &mut out);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let ng = self.ng(m);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(m), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("dot", ta, tb)?;
        let s = dot(ta.data(), tb.data());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), ng))
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).sq_norm();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SqNorm(a), ng)
    }

    /// Euclidean norm; its gradient at the origin is taken to be zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.value(a).sq_norm().sqrt();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Norm(a), ng)
    }

    /// Squared norm of every row of a matrix.
    pub fn row_sq_norms(&mut self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        let (_, c) = matrix_dims("row_sq_norms", tm)?;
        let out = tm.data().chunks_exact(c).map(|r| dot(r, r)).collect();
        let ng = self.ng(m);
        Ok(self.push(Tensor::vector(out), Op::RowSqNorms(m), ng))
    }

    /// Entry `i` of a vector as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = vector_len("pick", ta)?;
        if i >= n {
            return Err(Error::OutOfVocab { id: i, size: n });
        }
        let v = ta.data()[i];
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, i), ng))
    }

    /// Sum of equally shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("add_n"))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            check_same("add_n", &acc, t)?;
            axpy(1.0, t.data(), acc.data_mut());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(acc, Op::AddN(parts.to_vec()), ng))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns gradients for every trainable parameter reachable from `loss`.
    /// Frozen parameters and parameters the loss does not depend on are absent.
    pub fn backward(&self, loss: Var) -> Result<GradRecord> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(Error::NonScalarLoss(tl.shape().to_vec()));
        }
        if !tl.all_finite() {
            return Err(Error::NonFinite {
                context: "loss".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Op::Param(_) = node.op {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop_node(i, &dy, &mut grads)?;
        }

        let mut rec = GradRecord::new();
        for (pid, slot) in self.param_nodes.iter().enumerate() {
            let Some(v) = slot else { continue };
            if !self.nodes[v.0].needs_grad || v.0 > loss.0 {
                continue;
            }
            if let Some(g) = grads[v.0].take() {
                let shape = self.params.tensor(ParamId(pid)).shape().to_vec();
                let t = Tensor::new(shape, g)?;
                if !t.all_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient of `{}`", self.params.name(ParamId(pid))),
                    });
                }
                rec.insert(ParamId(pid), t);
            }
        }
        Ok(rec)
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.as_ref().expect("non-parameter node has a value");
        // Runs `f` on the (zero-initialised) gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| axpy(1.0, dy, g));
                acc(*b, &mut |g| axpy(1.0, dy, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| axpy(1.0, dy, g));
                acc(*b, &mut |g| axpy(-1.0, dy, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(vb) {
                        *gi += d * x;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(va) {
                        *gi += d * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |g| axpy(*k, dy, g)),
            Op::MulConst(a, c) => acc(*a, &mut |g| {
                for ((gi, d), x) in g.iter_mut().zip(dy).zip(c) {
                    *gi += d * x;
                }
            }),
            Op::AddRows(m, v) => {
                let c = self.value(*v).len();
                acc(*m, &mut |g| axpy(1.0, dy, g));
                acc(*v, &mut |g| {
                    for row in dy.chunks_exact(c) {
                        axpy(1.0, row, g);
                    }
                });
            }
            Op::MulRows(m, v) => {
                let (tm, tv) = (self.value(*m).data(), self.value(*v).data());
                let c = tv.len();
                acc(*m, &mut |g| {
                    for (grow, drow) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                        for ((gi, d), x) in grow.iter_mut().zip(drow).zip(tv) {
                            *gi += d * x;
                        }
                    }
                });
                acc(*v, &mut |g| {
                    for (mrow, drow) in tm.chunks_exact(c).zip(dy.chunks_exact(c)) {
                        for ((gi, d), x) in g.iter_mut().zip(drow).zip(mrow) {
                            *gi += d * x;
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |g| {
                for ((gi, d), t) in g.iter_mut().zip(dy).zip(y.data()) {
                    *gi += d * (1.0 - t * t);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |g| {
                for ((gi, d), s) in g.iter_mut().zip(dy).zip(y.data()) {
                    *gi += d * s * (1.0 - s);
                }
            }),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for ((gi, d), xi) in g.iter_mut().zip(dy).zip(x) {
                        if *xi > 0.0 {
                            *gi += d;
                        } else if *xi < 0.0 {
                            *gi -= d;
                        }
                    }
                })
            }
            Op::MatVec(m, x) => {
                let (tm, tx) = (self.value(*m), self.value(*x));
                let c = tx.len();
                acc(*m, &mut |g| {
                    for (grow, &d) in g.chunks_exact_mut(c).zip(dy) {
                        axpy(d, tx.data(), grow);
                    }
                });
                acc(*x, &mut |g| {
                    for (row, &d) in tm.data().chunks_exact(c).zip(dy) {
                        axpy(d, row, g);
                    }
                });
            }
            Op::MatVecT(m, w) => {
                let (tm, tw) = (self.value(*m), self.value(*w));
                let c = dy.len();
                acc(*m, &mut |g| {
                    for (grow, &wi) in g.chunks_exact_mut(c).zip(tw.data()) {
                        axpy(wi, dy, grow);
                    }
                });
                acc(*w, &mut |g| {
                    for (gi, row) in g.iter_mut().zip(tm.data().chunks_exact(c)) {
                        *gi += dot(row, dy);
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                let n = tb.rows();
                acc(*a, &mut |g| {
                    for (grow, drow) in g.chunks_exact_mut(k).zip(dy.chunks_exact(n)) {
                        for (&d, brow) in drow.iter().zip(tb.data().chunks_exact(k)) {
                            if d != 0.0 {
                                axpy(d, brow, grow);
                            }
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for (arow, drow) in ta.data().chunks_exact(k).zip(dy.chunks_exact(n)) {
                        for (&d, grow) in drow.iter().zip(g.chunks_exact_mut(k)) {
                            if d != 0.0 {
                                axpy(d, arow, grow);
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let s = y.data();
                let inner = dot(dy, s);
                acc(*a, &mut |g| {
                    for ((gi, d), si) in g.iter_mut().zip(dy).zip(s) {
                        *gi += si * (d - inner);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let total: f64 = dy.iter().sum();
                acc(*a, &mut |g| {
                    for ((gi, d), l) in g.iter_mut().zip(dy).zip(y.data()) {
                        *gi += d - l.exp() * total;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |g| axpy(1.0, &dy[off..off + n], g));
                    off += n;
                }
            }
            Op::Slice(a, start) => acc(*a, &mut |g| axpy(1.0, dy, &mut g[*start..*start + dy.len()])),
            Op::Row(m, r) => {
                let c = dy.len();
                acc(*m, &mut |g| axpy(1.0, dy, &mut g[r * c..(r + 1) * c]));
            }
            Op::Stack(rows) => {
                let c = dy.len() / rows.len();
                for (k, &r) in rows.iter().enumerate() {
                    acc(r, &mut |g| axpy(1.0, &dy[k * c..(k + 1) * c], g));
                }
            }
            Op::MeanRows(m) => {
                let r = self.value(*m).rows() as f64;
                acc(*m, &mut |g| {
                    for grow in g.chunks_exact_mut(dy.len()) {
                        axpy(1.0 / r, dy, grow);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| axpy(1.0, dy, g)),
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|gi| *gi += dy[0])),
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| axpy(dy[0], vb, g));
                acc(*b, &mut |g| axpy(dy[0], va, g));
            }
            Op::SqNorm(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| axpy(2.0 * dy[0], x, g));
            }
            Op::Norm(a) => {
                let n = y.data()[0];
                if n > 0.0 {
                    let x = self.value(*a).data();
                    acc(*a, &mut |g| axpy(dy[0] / n, x, g));
                }
            }
            Op::RowSqNorms(m) => {
                let x = self.value(*m).data();
                let c = x.len() / dy.len();
                acc(*m, &mut |g| {
                    for ((grow, xrow), &d) in g.chunks_exact_mut(c).zip(x.chunks_exact(c)).zip(dy) {
                        axpy(2.0 * d, xrow, grow);
                    }
                });
            }
            Op::Pick(a, k) => acc(*a, &mut |g| g[*k] += dy[0]),
            Op::AddN(parts) => {
                for &p in parts {
                    acc(p, &mut |g| axpy(1.0, dy, g));
                }
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: backward pass of `loss` on `graph`.
pub fn backward(graph: &Graph<'_>, loss: Var) -> Result<GradRecord> {
    graph.backward(loss)
}
