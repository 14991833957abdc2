//! Low-rank updates `h = W x + B A x` for cross-attention key/value maps.

use mbtensor::{rng::normal, Binder, Float, Graph, ParamId, ParamSet, Tensor, TensorError, Var};
use rand::Rng;

use crate::{Error, Result};

pub const DEFAULT_RANK: usize = 16;

/// One factor pair bound into a graph: `a[r×k]`, `b[d×r]`.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
}

/// Key and value factors of one cross-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerLora {
    pub k: LoraVars,
    pub v: LoraVars,
}

/// Dimensions `(d_layer, k_layer)` of an adapted projection `W[d×k]`.
pub type LayerDims = (usize, usize);

pub fn check_rank(rank: usize, dims: LayerDims) -> Result<()> {
    if rank == 0 || rank > dims.0.min(dims.1) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} must be in 1..={} for a {}×{} projection",
            dims.0.min(dims.1),
            dims.0,
            dims.1
        )));
    }
    Ok(())
}

/// `x · Wᵀ + (x · Aᵀ) · Bᵀ` for row-major tokens `x[n×k]`.
pub fn lora_project<T: Float>(g: &mut Graph<T>, x: Var, w: Var, lora: Option<LoraVars>) -> Result<Var> {
    let h = g.matmul_nt(x, w)?;
    let Some(l) = lora else { return Ok(h) };
    let (d, k) = (g.shape(w)[0], g.shape(w)[1]);
    let (ra, rb) = (g.shape(l.a).to_vec(), g.shape(l.b).to_vec());
    if ra.len() != 2 || rb.len() != 2 || ra[1] != k || rb[0] != d || ra[0] != rb[1] {
        return Err(TensorError::Shape {
            op: "lora_project",
            lhs: ra,
            rhs: rb,
        }
        .into());
    }
    check_rank(ra[0], (d, k))?;
    let ax = g.matmul_nt(x, l.a)?;
    let bax = g.matmul_nt(ax, l.b)?;
    Ok(g.add(h, bax)?)
}

/// Trainable factor ids for every adapted layer.
#[derive(Clone, Debug)]
pub struct LoraParams {
    pub rank: usize,
    pub layers: Vec<[ParamId; 4]>,
    pub dims: Vec<LayerDims>,
}

impl LoraParams {
    /// `A ~ N(0, 1/r)`, `B = 0`.
    pub fn init<T: Float>(ps: &mut ParamSet<T>, dims: &[LayerDims], rank: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (rank as f64).sqrt();
        let mut layers = Vec::with_capacity(dims.len());
        for (i, &(d, k)) in dims.iter().enumerate() {
            check_rank(rank, (d, k))?;
            let ka = ps.add(format!("lora.{i}.k.a"), normal(rng, [rank, k], std));
            let kb = ps.add(format!("lora.{i}.k.b"), Tensor::zeros([d, rank]));
            let va = ps.add(format!("lora.{i}.v.a"), normal(rng, [rank, k], std));
            let vb = ps.add(format!("lora.{i}.v.b"), Tensor::zeros([d, rank]));
            layers.push([ka, kb, va, vb]);
        }
        Ok(Self {
            rank,
            layers,
            dims: dims.to_vec(),
        })
    }

    pub fn bind<T: Float>(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>) -> Vec<LayerLora> {
        self.layers
            .iter()
            .map(|ids| {
                let [ka, kb, va, vb] = ids.map(|id| bd.var(g, id));
                LayerLora {
                    k: LoraVars { a: ka, b: kb },
                    v: LoraVars { a: va, b: vb },
                }
            })
            .collect()
    }

    /// `Σ 2·r·(d + k)`.
    pub fn num_scalars(&self) -> usize {
        self.dims.iter().map(|(d, k)| 2 * self.rank * (d + k)).sum()
    }
}

/// Binds a list of constant factor tensors, `[k.a, k.b, v.a, v.b]` per layer.
pub fn bind_constant<T: Float>(g: &mut Graph<T>, layers: &[[Tensor<f32>; 4]]) -> Vec<LayerLora> {
    layers
        .iter()
        .map(|ts| {
            let [ka, kb, va, vb] = ts.each_ref().map(|t| g.constant(t.cast()));
            LayerLora {
                k: LoraVars { a: ka, b: kb },
                v: LoraVars { a: va, b: vb },
            }
        })
        .collect()
}
