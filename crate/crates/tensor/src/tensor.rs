use std::ops::Range;

use crate::kernels;
use crate::{Float, Result, TensorError};

/// Dense row-major tensor.
///
/// `grad` is only ever populated on tensors with `requires_grad` set; a frozen
/// tensor rejects gradient accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    /// `n×n` identity.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::Invalid(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    /// Freezing a tensor also discards any gradient it held.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if !self.requires_grad {
            return Err(TensorError::Frozen);
        }
        if delta.len() != self.data.len() {
            return Err(TensorError::Length {
                shape: self.shape.clone(),
                expected: self.data.len(),
                actual: delta.len(),
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Invalid(format!("{op}: expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Self::new([m, n], kernels::matmul(&self.data, &other.data, m, k, n))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul_nt")?;
        let (n, k2) = other.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Self::new([m, n], kernels::matmul_nt(&self.data, &other.data, m, k, n))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        Self::new([c, r], kernels::transpose(&self.data, r, c))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        check_axis("softmax", &self.shape, axis)?;
        let (outer, len, inner) = kernels::axis_extents(&self.shape, axis);
        Self::new(self.shape.clone(), kernels::softmax(&self.data, outer, len, inner))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        check_axis("mean_axis", &self.shape, axis)?;
        let (outer, len, inner) = kernels::axis_extents(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Self::new(shape, kernels::mean_axis(&self.data, outer, len, inner))
    }

    pub fn l2_norm(&self) -> T {
        kernels::sum_squares(&self.data).sqrt()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
        let data: Vec<&[T]> = parts.iter().map(|p| p.data()).collect();
        let (shape, data) = concat_raw(&shapes, &data, axis)?;
        Self::new(shape, data)
    }

    fn spatial_dims(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(TensorError::Invalid(format!(
                "{op}: expected an H×W×C tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Copies the `rows × cols` window of an `H×W×C` tensor.
    pub fn slice_spatial(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        let (h, w, c) = self.spatial_dims("slice_spatial")?;
        check_window("slice_spatial", &rows, &cols, h, w)?;
        let mut data = Vec::with_capacity(rows.len() * cols.len() * c);
        for y in rows.clone() {
            let start = (y * w + cols.start) * c;
            data.extend_from_slice(&self.data[start..start + cols.len() * c]);
        }
        Self::new([rows.len(), cols.len(), c], data)
    }

    /// Writes `src` into the window starting at `(row, col)`.
    pub fn assign_spatial(&mut self, row: usize, col: usize, src: &Self) -> Result<()> {
        let (h, w, c) = self.spatial_dims("assign_spatial")?;
        let (sh, sw, sc) = src.spatial_dims("assign_spatial")?;
        if sc != c {
            return Err(TensorError::Shape {
                op: "assign_spatial",
                lhs: self.shape.clone(),
                rhs: src.shape.clone(),
            });
        }
        check_window("assign_spatial", &(row..row + sh), &(col..col + sw), h, w)?;
        for y in 0..sh {
            let dst = ((row + y) * w + col) * c;
            self.data[dst..dst + sw * c].copy_from_slice(&src.data[y * sw * c..(y + 1) * sw * c]);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_window(op: &'static str, rows: &Range<usize>, cols: &Range<usize>, h: usize, w: usize) -> Result<()> {
    if rows.start >= rows.end || rows.end > h {
        return Err(TensorError::Index {
            op,
            index: rows.end,
            extent: h,
        });
    }
    if cols.start >= cols.end || cols.end > w {
        return Err(TensorError::Index {
            op,
            index: cols.end,
            extent: w,
        });
    }
    Ok(())
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    if shape[axis] == 0 {
        return Err(TensorError::EmptyAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

/// Concatenates raw buffers along `axis`; all other extents must agree.
pub(crate) fn concat_raw<T: Float>(shapes: &[&[usize]], data: &[&[T]], axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let first = shapes[0];
    if axis >= first.len() {
        return Err(TensorError::Axis {
            op: "concat",
            axis,
            shape: first.to_vec(),
        });
    }
    for s in shapes {
        let same_rank = s.len() == first.len();
        if !same_rank || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (s, d) in shapes.iter().zip(data) {
            let chunk = s[axis] * inner;
            out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok((shape, out))
}
