//! Layer building blocks over [`mbtensor::Graph`]. Layers hold parameter
//! ids; values live in a [`ParamSet`] bound per graph through a [`Binder`].

use mbtensor::{rng::normal, Binder, Float, Graph, ParamId, ParamSet, Tensor, Var};
use rand::Rng;

use crate::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// `W[out×in] ~ N(0, gain²/in)`, zero bias.
    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, inp: usize, out: usize, bias: bool, gain: f64, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.w"), normal(rng, [out, inp], gain / (inp as f64).sqrt()));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros([out])));
        Self { w, b, inp, out }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let w = bd.var(g, self.w);
        let y = g.matmul_nt(x, w)?;
        match self.b {
            Some(b) => {
                let b = bd.var(g, b);
                add_row(g, y, b)
            }
            None => Ok(y),
        }
    }
}

/// Adds a row vector (`[n]` or `[1, n]`) to every row of `x`.
pub fn add_row<T: Float>(g: &mut Graph<T>, x: Var, row: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let cols = g.value(row).numel();
    let r = g.reshape(row, &[1, cols])?;
    let tiled = g.gather_rows(r, &vec![Some(0); rows])?;
    Ok(g.add(x, tiled)?)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full([dim], T::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let gamma = bd.var(g, self.gamma);
        let beta = bd.var(g, self.beta);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true, 1.0, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true, 1.0, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, bd, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, bd, h)
    }
}

/// Multi-head scaled dot-product attention. `q[n×d]`, `k[m×d]`, `v[m×d]`,
/// with `d` split evenly into `heads` column blocks; each head uses the
/// scale `1/√(d/heads)`.
pub fn attention<T: Float>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d || g.shape(v)[1] != d || g.shape(k)[0] != g.shape(v)[0] || heads == 0 || d % heads != 0 {
        return Err(mbtensor::TensorError::Shape {
            op: "attention",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        }
        .into());
    }
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hd, hd)?,
                g.slice_cols(k, h * hd, hd)?,
                g.slice_cols(v, h * hd, hd)?,
            )
        };
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let p = g.softmax(s, 1)?;
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Ok(g.concat(&outs, 1)?)
    }
}

/// Dense reference attention in `f64`, written independently of the graph.
pub fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, heads: usize) -> Vec<f64> {
    let hd = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                out[i * d + h * hd + c] = (0..m).map(|j| e[j] / z * v[j * d + h * hd + c]).sum();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mbtensor::RngStream;

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = RngStream::new(1).rng();
        let mut g = Graph::<f64>::new();
        let q = g.constant(normal(&mut rng, [5, 8], 1.0));
        let k = g.constant(normal(&mut rng, [1, 8], 1.0));
        let vt: Tensor<f64> = normal(&mut rng, [1, 8], 1.0);
        let v = g.constant(vt.clone());
        let o = attention(&mut g, q, k, v, 2).unwrap();
        for r in 0..5 {
            for c in 0..8 {
                assert!((g.value(o).data()[r * 8 + c] - vt.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_values_pass_through() {
        let mut rng = RngStream::new(2).rng();
        let mut g = Graph::<f64>::new();
        let q = g.constant(normal(&mut rng, [3, 4], 1.0));
        let k = g.constant(normal(&mut rng, [2, 4], 1.0));
        let row: Vec<f64> = vec![0.5, -1.0, 2.0, 0.25];
        let v = g.constant(Tensor::new([2, 4], [row.clone(), row.clone()].concat()).unwrap());
        let o = attention(&mut g, q, k, v, 1).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((g.value(o).data()[r * 4 + c] - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_case_matches_dense_oracle() {
        let mut rng = RngStream::new(3).rng();
        let (n, m, d) = (4, 6, 8);
        let q: Tensor<f64> = normal(&mut rng, [n, d], 1.0);
        let k: Tensor<f64> = normal(&mut rng, [m, d], 1.0);
        let v: Tensor<f64> = normal(&mut rng, [m, d], 1.0);
        for heads in [1, 2, 4] {
            let mut g = Graph::<f64>::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = attention(&mut g, qv, kv, vv, heads).unwrap();
            let want = attention_oracle(q.data(), k.data(), v.data(), n, m, d, heads);
            for (a, b) in g.value(o).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_attention_shapes_error() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros([2, 4]));
        let k = g.constant(Tensor::zeros([3, 4]));
        let v = g.constant(Tensor::zeros([2, 4]));
        assert!(attention(&mut g, q, k, v, 1).is_err());
    }

    #[test]
    fn linear_adds_bias_to_every_row() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = RngStream::new(4).rng();
        let lin = Linear::new(&mut ps, "l", 3, 2, true, 1.0, &mut rng);
        ps.get_mut(lin.b.unwrap()).data_mut().copy_from_slice(&[1.0, -1.0]);
        ps.get_mut(lin.w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let mut bd = Binder::new(&ps);
        let x = g.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = lin.forward(&mut g, &mut bd, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 1.0, 5.0, 4.0]);
    }
}
