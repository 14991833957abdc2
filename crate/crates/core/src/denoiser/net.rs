//! The latent noise predictor: a two-resolution transformer with
//! self-attention over cells, cross-attention to the prompt and a skip
//! connection across the coarse level.

use mbtensor::{Binder, Float, Graph, ParamSet, RngStream, Scope, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::lora::{lora_project, LayerDims, LayerLora};
use crate::nn::{add_row, attention, LayerNorm, Linear, Mlp};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub channels: usize,
    pub text_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    /// Resolution level of each block: 0 is the latent grid, each further
    /// level halves it. Consecutive levels differ by at most one.
    pub block_levels: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            channels: 96,
            text_dim: 64,
            attn_dim: 32,
            heads: 4,
            mlp_ratio: 2,
            time_dim: 64,
            block_levels: vec![0, 1, 1, 0],
        }
    }
}

impl DenoiserConfig {
    /// Width-8, single-block model for finite-difference checks.
    pub fn miniature(text_dim: usize) -> Self {
        Self {
            latent_channels: 4,
            latent_size: 4,
            channels: 8,
            text_dim,
            attn_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            time_dim: 8,
            block_levels: vec![0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("denoiser: {m}")));
        if self.block_levels.is_empty() || self.block_levels[0] != 0 || *self.block_levels.last().unwrap() != 0 {
            return bad("blocks must start and end at level 0");
        }
        if self.block_levels.windows(2).any(|w| w[0].abs_diff(w[1]) > 1) {
            return bad("levels may change by one per block");
        }
        let depth = *self.block_levels.iter().max().unwrap();
        if self.latent_size % (1 << depth) != 0 {
            return bad("latent size not divisible by the coarsest level");
        }
        if self.heads == 0 || self.attn_dim % self.heads != 0 || self.time_dim % 2 != 0 {
            return bad("attention width must split evenly into heads");
        }
        Ok(())
    }

    pub fn grid(&self, level: usize) -> (usize, usize) {
        let s = self.latent_size >> level;
        (s, s)
    }

    pub fn num_cross_layers(&self) -> usize {
        self.block_levels.len()
    }

    /// `(d, k)` of the key and value maps of every cross-attention layer.
    pub fn cross_dims(&self) -> Vec<LayerDims> {
        vec![(self.attn_dim, self.text_dim); self.num_cross_layers()]
    }
}

/// Frozen projections of one cross-attention layer, bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Where a cross-attention call happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossAttnSite {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
}

/// Computes the pre-output-projection cross-attention features `[n×d′]`
/// for normalized cell features `x[n×C]` laid out in raster order.
pub trait CrossAttnRouter<T: Float> {
    fn route(&self, g: &mut Graph<T>, site: CrossAttnSite, w: CrossAttnWeights, x: Var) -> Result<Var>;
}

/// One context for every cell, optionally with per-layer LoRA.
pub struct PlainRouter<'a> {
    pub context: Var,
    pub lora: Option<&'a [LayerLora]>,
}

/// Vanilla or LoRA-adapted attention of `x` to `context`.
pub fn cross_attend<T: Float>(
    g: &mut Graph<T>,
    site: CrossAttnSite,
    w: CrossAttnWeights,
    x: Var,
    context: Var,
    lora: Option<&LayerLora>,
) -> Result<Var> {
    let q = g.matmul_nt(x, w.wq)?;
    let k = lora_project(g, context, w.wk, lora.map(|l| l.k))?;
    let v = lora_project(g, context, w.wv, lora.map(|l| l.v))?;
    attention(g, q, k, v, site.heads)
}

impl<T: Float> CrossAttnRouter<T> for PlainRouter<'_> {
    fn route(&self, g: &mut Graph<T>, site: CrossAttnSite, w: CrossAttnWeights, x: Var) -> Result<Var> {
        let lora = match self.lora {
            Some(l) => Some(
                l.get(site.layer)
                    .ok_or_else(|| Error::Config(format!("no LoRA factors for cross-attention layer {}", site.layer)))?,
            ),
            None => None,
        };
        cross_attend(g, site, w, x, self.context, lora)
    }
}

#[derive(Clone, Debug)]
struct Block {
    level: usize,
    time: Linear,
    ln1: LayerNorm,
    sq: Linear,
    sk: Linear,
    sv: Linear,
    so: Linear,
    ln2: LayerNorm,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Arch {
    stem: Linear,
    pos: Vec<mbtensor::ParamId>,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    downs: Vec<Linear>,
    ups: Vec<Linear>,
    out_ln: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Denoiser<T: Float = f32> {
    cfg: DenoiserConfig,
    arch: Arch,
    params: ParamSet<T>,
}

/// Sinusoidal timestep features `[1×dim]`.
pub fn timestep_features<T: Float>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::of((t as f64 * f).sin());
        out[half + i] = T::of((t as f64 * f).cos());
    }
    Tensor::new([1, dim], out).expect("shape")
}

/// Row indices of the 3×3 neighbourhood of every cell, zero-padded.
fn conv_indices(h: usize, w: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(h * w * 9);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                    idx.push(inside.then(|| yy as usize * w + xx as usize));
                }
            }
        }
    }
    idx
}

/// Children of each coarse cell, `(0,0) (0,1) (1,0) (1,1)` order.
fn merge_indices(h: usize, w: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                idx.push(Some((2 * y + dy) * w + 2 * x + dx));
            }
        }
    }
    idx
}

/// Parent of each fine cell.
fn upsample_indices(h: usize, w: usize) -> Vec<Option<usize>> {
    (0..h * w).map(|i| Some((i / w / 2) * (w / 2) + (i % w) / 2)).collect()
}

fn conv3x3<T: Float>(g: &mut Graph<T>, bd: &mut Binder<'_, T>, lin: &Linear, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let cols = g.gather_rows(x, &conv_indices(h, w))?;
    let cols = g.reshape(cols, &[h * w, 9 * c])?;
    lin.forward(g, bd, cols)
}

impl Denoiser<f32> {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stream = RngStream::new(seed).split("denoiser-init");
        let mut rng = stream.rng();
        let rng = &mut rng;
        let mut ps = ParamSet::new();
        let c = cfg.channels;
        let stem = Linear::new(&mut ps, "stem", 9 * cfg.latent_channels, c, true, 1.0, rng);
        let depth = *cfg.block_levels.iter().max().unwrap();
        let pos = (0..=depth)
            .map(|l| {
                let (h, w) = cfg.grid(l);
                ps.add(format!("pos.{l}"), mbtensor::rng::normal(rng, [h * w, c], 0.02))
            })
            .collect();
        let time1 = Linear::new(&mut ps, "time.fc1", cfg.time_dim, c, true, 1.0, rng);
        let time2 = Linear::new(&mut ps, "time.fc2", c, c, true, 1.0, rng);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut prev = 0;
        for (i, &level) in cfg.block_levels.iter().enumerate() {
            if level > prev {
                downs.push(Linear::new(&mut ps, &format!("down.{}", downs.len()), 4 * c, c, true, 1.0, rng));
            } else if level < prev {
                ups.push(Linear::new(&mut ps, &format!("up.{}", ups.len()), 2 * c, c, true, 1.0, rng));
            }
            prev = level;
            let n = format!("block.{i}");
            blocks.push(Block {
                level,
                time: Linear::new(&mut ps, &format!("{n}.time"), c, c, true, 1.0, rng),
                ln1: LayerNorm::new(&mut ps, &format!("{n}.ln1"), c),
                sq: Linear::new(&mut ps, &format!("{n}.self.q"), c, cfg.attn_dim, false, 1.0, rng),
                sk: Linear::new(&mut ps, &format!("{n}.self.k"), c, cfg.attn_dim, false, 1.0, rng),
                sv: Linear::new(&mut ps, &format!("{n}.self.v"), c, cfg.attn_dim, false, 1.0, rng),
                so: Linear::new(&mut ps, &format!("{n}.self.o"), cfg.attn_dim, c, true, 1.0, rng),
                ln2: LayerNorm::new(&mut ps, &format!("{n}.ln2"), c),
                cq: Linear::new(&mut ps, &format!("{n}.cross.q"), c, cfg.attn_dim, false, 1.0, rng),
                ck: Linear::new(&mut ps, &format!("{n}.cross.k"), cfg.text_dim, cfg.attn_dim, false, 1.0, rng),
                cv: Linear::new(&mut ps, &format!("{n}.cross.v"), cfg.text_dim, cfg.attn_dim, false, 1.0, rng),
                co: Linear::new(&mut ps, &format!("{n}.cross.o"), cfg.attn_dim, c, true, 1.0, rng),
                ln3: LayerNorm::new(&mut ps, &format!("{n}.ln3"), c),
                mlp: Mlp::new(&mut ps, &format!("{n}.mlp"), c, c * cfg.mlp_ratio, rng),
            });
        }
        let out_ln = LayerNorm::new(&mut ps, "out.ln", c);
        let out = Linear::new(&mut ps, "out", 9 * c, cfg.latent_channels, true, 0.5, rng);
        Ok(Self {
            cfg,
            arch: Arch {
                stem,
                pos,
                time1,
                time2,
                blocks,
                downs,
                ups,
                out_ln,
                out,
            },
            params: ps,
        })
    }
}

impl<T: Float> Denoiser<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Float>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Bound projections of cross-attention layer `layer`.
    pub fn cross_weights(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>, layer: usize) -> CrossAttnWeights {
        let b = &self.arch.blocks[layer];
        CrossAttnWeights {
            wq: bd.var(g, b.cq.w),
            wk: bd.var(g, b.ck.w),
            wv: bd.var(g, b.cv.w),
        }
    }

    pub fn cross_site(&self, layer: usize) -> CrossAttnSite {
        let (height, width) = self.cfg.grid(self.arch.blocks[layer].level);
        CrossAttnSite {
            layer,
            height,
            width,
            heads: self.cfg.heads,
        }
    }

    /// Cross-attention sub-layer: LayerNorm, routed attention, output
    /// projection. Returns the residual update.
    pub fn cross_attention_layer(
        &self,
        g: &mut Graph<T>,
        bd: &mut Binder<'_, T>,
        layer: usize,
        x: Var,
        router: &dyn CrossAttnRouter<T>,
    ) -> Result<Var> {
        let b = &self.arch.blocks[layer];
        let h = b.ln2.forward(g, bd, x)?;
        let prev = g.set_scope(Scope::CrossAttention);
        let w = self.cross_weights(g, bd, layer);
        let f = router.route(g, self.cross_site(layer), w, h)?;
        let out = b.co.forward(g, bd, f);
        g.set_scope(prev);
        out
    }

    /// `ε̂ = ε_θ(z_t, t, ·)` for a latent `z_t[c×h×w]`. `bd` must bind this
    /// network's parameters.
    pub fn forward(&self, g: &mut Graph<T>, bd: &mut Binder<'_, T>, z_t: Var, t: usize, router: &dyn CrossAttnRouter<T>) -> Result<Var> {
        let cfg = &self.cfg;
        let (c_in, s) = (cfg.latent_channels, cfg.latent_size);
        if g.shape(z_t) != [c_in, s, s] {
            return Err(Error::Config(format!("latent must be {c_in}×{s}×{s}, got {:?}", g.shape(z_t))));
        }
        let a = &self.arch;
        let z = g.reshape(z_t, &[c_in, s * s])?;
        let z = g.transpose(z)?;
        let mut x = conv3x3(g, bd, &a.stem, z, s, s)?;
        let p0 = bd.var(g, a.pos[0]);
        x = g.add(x, p0)?;

        let tf = g.constant(timestep_features(t, cfg.time_dim));
        let temb = a.time1.forward(g, bd, tf)?;
        let temb = g.silu(temb);
        let temb = a.time2.forward(g, bd, temb)?;
        let temb = g.silu(temb);

        let mut level = 0;
        let mut skips: Vec<Var> = Vec::new();
        let (mut downs, mut ups) = (a.downs.iter(), a.ups.iter());
        for (i, b) in a.blocks.iter().enumerate() {
            let (h, w) = cfg.grid(level);
            if b.level > level {
                skips.push(x);
                let m = g.gather_rows(x, &merge_indices(h, w))?;
                let m = g.reshape(m, &[h * w / 4, 4 * cfg.channels])?;
                x = downs.next().expect("down layer").forward(g, bd, m)?;
                let p = bd.var(g, a.pos[b.level]);
                x = g.add(x, p)?;
            } else if b.level < level {
                let (fh, fw) = cfg.grid(b.level);
                let u = g.gather_rows(x, &upsample_indices(fh, fw))?;
                let skip = skips.pop().expect("skip");
                let cat = g.concat(&[u, skip], 1)?;
                x = ups.next().expect("up layer").forward(g, bd, cat)?;
            }
            level = b.level;

            let tp = b.time.forward(g, bd, temb)?;
            x = add_row(g, x, tp)?;

            let h = b.ln1.forward(g, bd, x)?;
            let prev = g.set_scope(Scope::SelfAttention);
            let q = b.sq.forward(g, bd, h)?;
            let k = b.sk.forward(g, bd, h)?;
            let v = b.sv.forward(g, bd, h)?;
            let att = attention(g, q, k, v, cfg.heads)?;
            let att = b.so.forward(g, bd, att)?;
            g.set_scope(prev);
            x = g.add(x, att)?;

            let ca = self.cross_attention_layer(g, bd, i, x, router)?;
            x = g.add(x, ca)?;

            let h = b.ln3.forward(g, bd, x)?;
            let m = b.mlp.forward(g, bd, h)?;
            x = g.add(x, m)?;
        }

        let h = a.out_ln.forward(g, bd, x)?;
        let h = g.silu(h);
        let e = conv3x3(g, bd, &a.out, h, s, s)?;
        let e = g.transpose(e)?;
        Ok(g.reshape(e, &[c_in, s, s])?)
    }

    /// Convenience wrapper: one graph, constant inputs, no gradients.
    pub fn predict(&self, z_t: &Tensor<f32>, t: usize, context: &Tensor<f32>, lora: Option<&[[Tensor<f32>; 4]]>) -> Result<Tensor<f32>> {
        let mut g = Graph::<T>::new();
        let mut bd = Binder::new(&self.params);
        let z = g.constant(z_t.cast());
        let ctx = g.constant(context.cast());
        let bound = lora.map(|l| super::lora::bind_constant(&mut g, l));
        let router = PlainRouter {
            context: ctx,
            lora: bound.as_deref(),
        };
        let out = self.forward(&mut g, &mut bd, z, t, &router)?;
        Ok(g.value(out).cast())
    }
}
