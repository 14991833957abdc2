//! Query-token encoder: learnable queries read the class-noun text through
//! self-attention and the visual features through cross-attention.

use mbtensor::{rng::normal, Binder, Float, Graph, ParamId, ParamSet, RngStream, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{attention, LayerNorm, Linear, Mlp};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub queries: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub visual_dim: usize,
    pub query_std: f64,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            queries: 16,
            dim: 64,
            blocks: 2,
            heads: 4,
            mlp_ratio: 4,
            visual_dim: crate::encoders::VISUAL_DIM,
            query_std: 0.1,
        }
    }
}

impl QFormerConfig {
    pub fn miniature(dim: usize) -> Self {
        Self {
            queries: 4,
            dim,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            visual_dim: crate::encoders::VISUAL_DIM,
            query_std: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct QBlock {
    ln_s: LayerNorm,
    sq: Linear,
    sk: Linear,
    sv: Linear,
    so: Linear,
    ln_c: LayerNorm,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    ln_m: LayerNorm,
    mlp: Mlp,
}

/// Layer ids of a query encoder. Parameters live in a caller-owned
/// [`ParamSet`] so they can be trained together with LoRA factors.
#[derive(Clone, Debug)]
pub struct QFormer {
    cfg: QFormerConfig,
    queries: ParamId,
    visual: Linear,
    blocks: Vec<QBlock>,
}

impl QFormer {
    pub fn init<T: Float>(cfg: QFormerConfig, ps: &mut ParamSet<T>, stream: &RngStream) -> Result<Self> {
        if cfg.queries == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("invalid query encoder config {cfg:?}")));
        }
        let mut rng = stream.split("qformer").rng();
        let rng = &mut rng;
        let d = cfg.dim;
        let queries = ps.add("qformer.queries", normal(rng, [cfg.queries, d], cfg.query_std));
        let visual = Linear::new(ps, "qformer.visual", cfg.visual_dim, d, true, 1.0, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = format!("qformer.{i}");
                QBlock {
                    ln_s: LayerNorm::new(ps, &format!("{n}.ln_s"), d),
                    sq: Linear::new(ps, &format!("{n}.self.q"), d, d, false, 1.0, rng),
                    sk: Linear::new(ps, &format!("{n}.self.k"), d, d, false, 1.0, rng),
                    sv: Linear::new(ps, &format!("{n}.self.v"), d, d, false, 1.0, rng),
                    so: Linear::new(ps, &format!("{n}.self.o"), d, d, true, 1.0, rng),
                    ln_c: LayerNorm::new(ps, &format!("{n}.ln_c"), d),
                    cq: Linear::new(ps, &format!("{n}.cross.q"), d, d, false, 1.0, rng),
                    ck: Linear::new(ps, &format!("{n}.cross.k"), d, d, false, 1.0, rng),
                    cv: Linear::new(ps, &format!("{n}.cross.v"), d, d, false, 1.0, rng),
                    co: Linear::new(ps, &format!("{n}.cross.o"), d, d, true, 1.0, rng),
                    ln_m: LayerNorm::new(ps, &format!("{n}.ln_m"), d),
                    mlp: Mlp::new(ps, &format!("{n}.mlp"), d, d * cfg.mlp_ratio, rng),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            queries,
            visual,
            blocks,
        })
    }

    pub fn config(&self) -> &QFormerConfig {
        &self.cfg
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    /// Output tokens `O[K×d]` for visual features `xi[P×d_v]` and text rows
    /// `text[n×d]`. The text and visual inputs are only read.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>, xi: Var, text: Var) -> Result<Var> {
        let d = self.cfg.dim;
        if g.shape(text).len() != 2 || g.shape(text)[1] != d {
            return Err(Error::Config(format!("text rows must be n×{d}, got {:?}", g.shape(text))));
        }
        let k = self.cfg.queries;
        let mut x = bd.var(g, self.queries);
        let vis = self.visual.forward(g, bd, xi)?;
        for b in &self.blocks {
            let joint = g.concat(&[x, text], 0)?;
            let h = b.ln_s.forward(g, bd, joint)?;
            let rows: Vec<Option<usize>> = (0..k).map(Some).collect();
            let hq = g.gather_rows(h, &rows)?;
            let q = b.sq.forward(g, bd, hq)?;
            let kk = b.sk.forward(g, bd, h)?;
            let v = b.sv.forward(g, bd, h)?;
            let a = attention(g, q, kk, v, self.cfg.heads)?;
            let a = b.so.forward(g, bd, a)?;
            x = g.add(x, a)?;

            let h = b.ln_c.forward(g, bd, x)?;
            let q = b.cq.forward(g, bd, h)?;
            let kk = b.ck.forward(g, bd, vis)?;
            let v = b.cv.forward(g, bd, vis)?;
            let a = attention(g, q, kk, v, self.cfg.heads)?;
            let a = b.co.forward(g, bd, a)?;
            x = g.add(x, a)?;

            let h = b.ln_m.forward(g, bd, x)?;
            let m = b.mlp.forward(g, bd, h)?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }

    /// `v = (1/K) Σ o_k`, shape `[d]`.
    pub fn extract_embedding<T: Float>(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>, xi: Var, text: Var) -> Result<Var> {
        let o = self.forward(g, bd, xi, text)?;
        token_mean(g, o)
    }
}

/// Mean of the rows of `o[K×d]`, reshaped to `[d]`.
pub fn token_mean<T: Float>(g: &mut Graph<T>, o: Var) -> Result<Var> {
    let d = g.shape(o)[1];
    let m = g.mean_axis(o, 0)?;
    Ok(g.reshape(m, &[d])?)
}
