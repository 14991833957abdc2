//! Raw row-major kernels shared by the eager tensor API and the tape.

use crate::Float;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

pub(crate) fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

pub(crate) fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn<T: Float>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let at = transpose(a, k, m);
    matmul(&at, b, m, k, n)
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Float>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            let inv = sum.recip();
            for j in 0..len {
                y[at(j)] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Float>(y: &[T], g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += g[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn mean_axis<T: Float>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (acc, &v) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let inv = T::of(len as f64).recip();
    y.iter_mut().for_each(|v| *v *= inv);
    y
}

pub(crate) fn sum_squares<T: Float>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}
