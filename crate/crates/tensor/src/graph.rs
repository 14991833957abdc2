//! The recording tape.
//!
//! Every op appends a node holding its forward value. Nodes are appended in
//! dependency order, so walking the tape backwards is a valid topological
//! order for the reverse pass.

use crate::flops::{matmul_flops, FlopCounter, Scope};
use crate::kernels;
use crate::tensor::concat_raw;
use crate::{Float, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Recip(Var),
    Sqrt(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<Option<usize>>),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    Softmax(Var, usize),
    MeanAxis(Var, usize),
    Sum(Var),
    SumSquares(Var),
    L2Norm(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Float> Gradients<T> {
    /// `None` for untracked leaves and for leaves the loss does not reach.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes the reverse pass processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    backpropagated: bool,
    scope: Scope,
    flops: FlopCounter,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn mat(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Invalid(format!("{op}: expected a matrix, got shape {shape:?}"))),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backpropagated: false,
            scope: Scope::Other,
            flops: FlopCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    /// Sets the scope future matmuls are charged to and returns the old one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, parents)
    }

    /// A leaf that is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat("matmul", self.shape(a))?;
        let (k2, n) = mat("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.flops.record(self.scope, matmul_flops(m, k, n));
        Ok(self.push_data(vec![m, n], data, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` projections and `Q · Kᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat("matmul_nt", self.shape(a))?;
        let (n, k2) = mat("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.flops.record(self.scope, matmul_flops(m, k, n));
        Ok(self.push_data(vec![m, n], data, Op::MatMulNt(a, b), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_data(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item()?;
        let value = self.value(a).map(|x| x * factor);
        Ok(self.push(value, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| x.recip())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * kernels::sigmoid(x))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Row `j` of the output is row `idx[j]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = mat("gather_rows", self.shape(a))?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); idx.len() * cols];
        for (j, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        extent: rows,
                    });
                }
                data[j * cols..(j + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        Ok(self.push_data(vec![idx.len(), cols], data, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let data: Vec<&[T]> = parts.iter().map(|&p| self.value(p).data()).collect();
        let (shape, data) = concat_raw(&shapes, &data, axis)?;
        Ok(self.push_data(shape, data, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = mat("slice_cols", self.shape(a))?;
        if start + len > cols || len == 0 {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: cols,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push_data(vec![rows, len], data, Op::SliceCols(a, start), &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).mean_axis(axis)?;
        Ok(self.push(value, Op::MeanAxis(a, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = kernels::sum_squares(self.value(a).data());
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Mean of squared elements.
    pub fn mean_squares(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_squares(a);
        self.scale(s, T::of(n as f64).recip())
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).l2_norm();
        self.push(Tensor::scalar(n), Op::L2Norm(a), &[a])
    }

    /// Normalizes each row of `x[n×c]` and applies the per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = mat("layer_norm", self.shape(x))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_c = T::of(c as f64).recip();
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push_data(
            vec![n, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Runs the reverse pass from a scalar `loss`.
    ///
    /// A graph can be backpropagated once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backpropagated = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        // Only leaf gradients are meaningful to callers.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let mut acc = |v: Var, delta: Vec<T>| {
            if !nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        let tracked = |v: Var| nodes[v.0].tracked;
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                if tracked(a) {
                    acc(a, kernels::matmul_nt(g, val(b), m, n, k));
                }
                if tracked(b) {
                    acc(b, kernels::matmul_tn(val(a), g, m, k, n));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[0];
                if tracked(a) {
                    acc(a, kernels::matmul(g, val(b), m, n, k));
                }
                if tracked(b) {
                    acc(b, kernels::matmul_tn(g, val(a), m, n, k));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                if tracked(b) {
                    acc(b, g.iter().map(|&x| -x).collect());
                }
            }
            &Op::Mul(a, b) => {
                if tracked(a) {
                    acc(a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect());
                }
                if tracked(b) {
                    acc(b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::Scale(a, s) => acc(a, g.iter().map(|&x| x * s).collect()),
            &Op::AddScalar(a) => acc(a, g.to_vec()),
            &Op::ScaleBy(a, s) => {
                let factor = val(s)[0];
                if tracked(a) {
                    acc(a, g.iter().map(|&x| x * factor).collect());
                }
                if tracked(s) {
                    let d = g.iter().zip(val(a)).map(|(&x, &y)| x * y).sum::<T>();
                    acc(s, vec![d]);
                }
            }
            &Op::Recip(a) => acc(a, g.iter().zip(out).map(|(&x, &y)| -x * y * y).collect()),
            &Op::Sqrt(a) => {
                let half = T::of(0.5);
                acc(a, g.iter().zip(out).map(|(&x, &y)| x * half / y).collect())
            }
            &Op::Silu(a) => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(&x, &z)| {
                        let s = kernels::sigmoid(z);
                        x * s * (T::one() + z * (T::one() - s))
                    })
                    .collect(),
            ),
            &Op::Reshape(a) => acc(a, g.to_vec()),
            &Op::Transpose(a) => {
                let (r, c) = (shape(a)[0], shape(a)[1]);
                acc(a, kernels::transpose(g, c, r));
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let cols = shape(a)[1];
                let mut d = vec![T::zero(); val(a).len()];
                for (j, src) in idx.iter().enumerate() {
                    if let Some(r) = *src {
                        for (dst, &x) in d[r * cols..(r + 1) * cols].iter_mut().zip(&g[j * cols..(j + 1) * cols]) {
                            *dst += x;
                        }
                    }
                }
                acc(a, d);
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = shape(p)[axis] * inner;
                    if tracked(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(p, d);
                    }
                    offset += chunk;
                }
            }
            &Op::SliceCols(a, start) => {
                let (rows, cols) = (shape(a)[0], shape(a)[1]);
                let len = nodes[i].value.shape()[1];
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(a, d);
            }
            &Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::axis_extents(shape(a), axis);
                acc(a, kernels::softmax_backward(out, g, outer, len, inner));
            }
            &Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = kernels::axis_extents(shape(a), axis);
                let inv = T::of(len as f64).recip();
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for k in 0..inner {
                            d[(o * len + j) * inner + k] = g[o * inner + k] * inv;
                        }
                    }
                }
                acc(a, d);
            }
            &Op::Sum(a) => acc(a, vec![g[0]; val(a).len()]),
            &Op::SumSquares(a) => {
                let two = T::of(2.0) * g[0];
                acc(a, val(a).iter().map(|&x| two * x).collect());
            }
            &Op::L2Norm(a) => {
                let norm = out[0];
                if norm > T::zero() {
                    let s = g[0] / norm;
                    acc(a, val(a).iter().map(|&x| x * s).collect());
                } else {
                    acc(a, vec![T::zero(); val(a).len()]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c) = (shape(x)[0], shape(x)[1]);
                let gm = val(gamma);
                if tracked(gamma) {
                    let mut d = vec![T::zero(); c];
                    for r in 0..n {
                        for j in 0..c {
                            d[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    acc(gamma, d);
                }
                if tracked(beta) {
                    let mut d = vec![T::zero(); c];
                    for r in 0..n {
                        for j in 0..c {
                            d[j] += g[r * c + j];
                        }
                    }
                    acc(beta, d);
                }
                if tracked(x) {
                    let inv_c = T::of(c as f64).recip();
                    let mut d = vec![T::zero(); n * c];
                    for r in 0..n {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = g[r * c + j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * c + j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        for j in 0..c {
                            let dh = g[r * c + j] * gm[j];
                            d[r * c + j] = rstd[r] * (dh - mean_dh - xhat[r * c + j] * mean_dh_h);
                        }
                    }
                    acc(x, d);
                }
            }
        }
    }
}
