//! Rescaling of a customized embedding to its class noun's norm.

use mbtensor::{Float, Graph, Tensor, Var};

use crate::{Error, Result};

/// `v̂ = v · ‖c‖ / ‖v‖`, computed in `f64`.
pub fn acn(v: &[f32], target_norm: f64) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let s = target_norm / norm;
    Ok(v.iter().map(|&x| (x as f64 * s) as f32).collect())
}

pub fn acn_tensor(v: &Tensor<f32>, target_norm: f64) -> Result<Tensor<f32>> {
    Ok(Tensor::new(v.shape().to_vec(), acn(v.data(), target_norm)?)?)
}

/// Differentiable form of [`acn`].
pub fn acn_var<T: Float>(g: &mut Graph<T>, v: Var, target_norm: f64) -> Result<Var> {
    if g.value(v).l2_norm() == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let n = g.l2_norm(v);
    let inv = g.recip(n);
    let s = g.scale(inv, T::of(target_norm));
    Ok(g.scale_by(v, s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn rescales_large_embedding_to_class_norm() {
        let mut v = vec![0f32; 64];
        v[0] = 111.02;
        let out = acn(&v, 0.37).unwrap();
        assert!((norm(&out) - 0.37).abs() < 1e-7);
    }

    #[test]
    fn fixed_point_when_norms_match() {
        let v = vec![0.3f32, 0.4];
        let out = acn(&v, 0.5).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_norm_is_an_error() {
        assert!(matches!(acn(&[0.0; 4], 0.3), Err(Error::ZeroNorm)));
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([4]));
        assert!(matches!(acn_var(&mut g, z, 0.3), Err(Error::ZeroNorm)));
    }

    #[test]
    fn graph_form_matches_eager() {
        let v = Tensor::new([3], vec![1.5f32, -2.0, 0.25]).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(v.clone());
        let y = acn_var(&mut g, x, 0.33).unwrap();
        let eager = acn(v.data(), 0.33).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&eager) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
