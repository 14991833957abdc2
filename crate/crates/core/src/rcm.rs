//! Training-free composition of concept modules by partitioning
//! cross-attention over bounding boxes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mbtensor::{Binder, Float, FlopCounter, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::concept::ConceptModule;
use crate::denoiser::lora::{bind_constant, lora_project, LayerDims, LayerLora};
use crate::denoiser::net::cross_attend;
use crate::denoiser::{CrossAttnRouter, CrossAttnSite, CrossAttnWeights, Denoiser};
use crate::encoders::vocab::{tokenize, PromptEmbedding, Vocabulary};
use crate::nn::attention;
use crate::{Error, Result};

pub const LAYOUT_VERSION: u32 = 1;
pub const MAX_REGIONS: usize = 8;
/// Tolerance of the per-cell weight-sum assertion.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Half-open cell ranges `rows × cols` of a box at one resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellBox {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl CellBox {
    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }

    /// Raster-order cell indices on a grid of width `w`.
    pub fn cells(&self, w: usize) -> Vec<usize> {
        (self.r0..self.r1)
            .flat_map(|r| (self.c0..self.c1).map(move |c| r * w + c))
            .collect()
    }
}

fn map_axis(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = ((lo * n as f64).floor().max(0.0) as usize).min(n - 1);
    let b = ((hi * n as f64).ceil() as usize).min(n).max(a + 1);
    (a, b)
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.x0, self.y0, self.x1, self.y1].into_iter().all(inside) || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Layout(format!(
                "bbox {:?} must satisfy 0 ≤ x0 < x1 ≤ 1 and 0 ≤ y0 < y1 ≤ 1",
                [self.x0, self.y0, self.x1, self.y1]
            )));
        }
        Ok(())
    }

    /// `floor` for the low edge and `ceil` for the high edge, clamped to the
    /// grid, at least one cell per axis.
    pub fn to_cells(&self, h: usize, w: usize) -> CellBox {
        let (r0, r1) = map_axis(self.y0, self.y1, h);
        let (c0, c1) = map_axis(self.x0, self.x1, w);
        CellBox { r0, r1, c0, c1 }
    }
}

/// One concept's placement.
#[derive(Clone, Debug)]
pub struct RegionSpec {
    pub module: Arc<ConceptModule>,
    pub bbox: BoundingBox,
    pub prompt: Vec<String>,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub base_prompt: Vec<String>,
    pub regions: Vec<RegionSpec>,
}

impl Layout {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() || self.regions.len() > MAX_REGIONS {
            return Err(Error::Layout(format!("need 1..={MAX_REGIONS} regions, got {}", self.regions.len())));
        }
        let mut seen = BTreeSet::new();
        for r in &self.regions {
            let ph = &r.module.placeholder;
            if !seen.insert(ph.clone()) {
                return Err(Error::Layout(format!("placeholder {ph:?} is used by more than one region")));
            }
            let count = r.prompt.iter().filter(|w| *w == ph).count();
            if count != 1 {
                return Err(Error::Layout(format!(
                    "region prompt {:?} must contain {ph:?} exactly once (found {count})",
                    r.prompt.join(" ")
                )));
            }
            if !(r.weight >= 0.0 && r.weight.is_finite()) {
                return Err(Error::Layout(format!("region {ph:?} has invalid weight {}", r.weight)));
            }
            r.bbox.validate()?;
        }
        Ok(())
    }

    /// Regions in placeholder order, so results do not depend on the order
    /// they were listed in.
    pub fn sorted_regions(&self) -> Vec<&RegionSpec> {
        let mut v: Vec<&RegionSpec> = self.regions.iter().collect();
        v.sort_by(|a, b| a.module.placeholder.cmp(&b.module.placeholder));
        v
    }
}

/// `c_i = τ(p_i) + τ(p_base)`, with the region's placeholder bound to `v̂`.
pub fn region_text_embedding(spec: &RegionSpec, base_prompt: &[String], vocab: &Vocabulary) -> Result<PromptEmbedding> {
    let bindings = BTreeMap::from([(spec.module.placeholder.clone(), spec.module.embedding_final.clone())]);
    let region = vocab.encode_text(&spec.prompt, &bindings)?;
    let base = vocab.encode_text(base_prompt, &BTreeMap::new())?;
    Ok(PromptEmbedding {
        tokens: region.tokens.add(&base.tokens)?,
        mask: region.mask.iter().zip(&base.mask).map(|(a, b)| *a || *b).collect(),
    })
}

/// How overlapping regions are blended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMode {
    /// `Σ w̄_i f̂_i` with weights renormalized per cell.
    #[default]
    WeightedMean,
    /// `(1/η) Σ w_i f̂_i` with the raw weights, where `η` regions overlap.
    Literal,
}

/// Per-cell blend coefficients at one resolution: `coef[i][cell]`, and the
/// list of uncovered cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Blend {
    pub boxes: Vec<CellBox>,
    pub coef: Vec<Vec<f64>>,
    pub uncovered: Vec<usize>,
}

pub fn blend_weights(boxes: &[CellBox], weights: &[f64], h: usize, w: usize, mode: OverlapMode) -> Result<Blend> {
    let n = h * w;
    let mut cover = vec![Vec::new(); n];
    for (i, b) in boxes.iter().enumerate() {
        for c in b.cells(w) {
            cover[c].push(i);
        }
    }
    let mut coef = vec![vec![0.0; n]; boxes.len()];
    let mut uncovered = Vec::new();
    for (cell, regs) in cover.iter().enumerate() {
        match regs.len() {
            0 => uncovered.push(cell),
            1 => coef[regs[0]][cell] = 1.0,
            eta => {
                let total: f64 = regs.iter().map(|&i| weights[i]).sum();
                if !(total > 0.0) {
                    return Err(Error::Layout(format!("overlap at cell {cell} ({h}×{w}) has zero total weight")));
                }
                match mode {
                    OverlapMode::WeightedMean => {
                        let mut sum = 0.0;
                        for &i in regs {
                            let wb = weights[i] / total;
                            coef[i][cell] = wb;
                            sum += wb;
                        }
                        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                            return Err(Error::validation("overlap weights sum to one", format!("cell {cell}: {sum}")));
                        }
                    }
                    OverlapMode::Literal => {
                        for &i in regs {
                            coef[i][cell] = weights[i] / eta as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(Blend {
        boxes: boxes.to_vec(),
        coef,
        uncovered,
    })
}

/// Region conditioning already bound into a graph.
pub struct BoundRegion {
    pub bbox: BoundingBox,
    pub weight: f64,
    pub context: Var,
    pub lora: Vec<LayerLora>,
}

/// Routes each cross-attention layer through the region partition. Regions
/// must be in placeholder order.
pub struct RegionalRouter {
    pub regions: Vec<BoundRegion>,
    pub base_context: Var,
    pub overlap: OverlapMode,
}

impl<T: Float> CrossAttnRouter<T> for RegionalRouter {
    fn route(&self, g: &mut Graph<T>, site: CrossAttnSite, w: CrossAttnWeights, x: Var) -> Result<Var> {
        let (h, wd) = (site.height, site.width);
        let n = h * wd;
        let boxes: Vec<CellBox> = self.regions.iter().map(|r| r.bbox.to_cells(h, wd)).collect();
        for (i, b) in boxes.iter().enumerate() {
            if b.area() == 0 {
                return Err(Error::EmptyRegion {
                    region: i.to_string(),
                    height: h,
                    width: wd,
                });
            }
        }
        let weights: Vec<f64> = self.regions.iter().map(|r| r.weight).collect();
        let blend = blend_weights(&boxes, &weights, h, wd, self.overlap)?;
        let dim = g.shape(w.wq)[0];
        let mut out: Option<Var> = None;
        for (i, r) in self.regions.iter().enumerate() {
            let cells = boxes[i].cells(wd);
            let crop = g.gather_rows(x, &cells.iter().map(|&c| Some(c)).collect::<Vec<_>>())?;
            let lora = r
                .lora
                .get(site.layer)
                .ok_or_else(|| Error::Config(format!("region {i} has no LoRA factors for layer {}", site.layer)))?;
            let q = g.matmul_nt(crop, w.wq)?;
            let k = lora_project(g, r.context, w.wk, Some(lora.k))?;
            let v = lora_project(g, r.context, w.wv, Some(lora.v))?;
            let f = attention(g, q, k, v, site.heads)?;
            let mut pos = vec![None; n];
            for (j, &c) in cells.iter().enumerate() {
                pos[c] = Some(j);
            }
            let scattered = g.gather_rows(f, &pos)?;
            let mask = Tensor::from_fn([n, dim], |e| T::of(blend.coef[i][e / dim]));
            let mask = g.constant(mask);
            let part = g.mul(scattered, mask)?;
            out = Some(match out {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
        }
        if !blend.uncovered.is_empty() {
            let idx: Vec<Option<usize>> = blend.uncovered.iter().map(|&c| Some(c)).collect();
            let crop = g.gather_rows(x, &idx)?;
            let f = cross_attend(g, site, w, crop, self.base_context, None)?;
            let mut pos = vec![None; n];
            for (j, &c) in blend.uncovered.iter().enumerate() {
                pos[c] = Some(j);
            }
            let part = g.gather_rows(f, &pos)?;
            out = Some(match out {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
        }
        Ok(out.expect("at least one region"))
    }
}

/// Text embeddings and factors of a validated layout, ready to bind.
#[derive(Clone, Debug)]
pub struct PreparedLayout {
    pub regions: Vec<PreparedRegion>,
    pub base: PromptEmbedding,
    pub overlap: OverlapMode,
}

#[derive(Clone, Debug)]
pub struct PreparedRegion {
    pub placeholder: String,
    pub bbox: BoundingBox,
    pub weight: f64,
    pub context: PromptEmbedding,
    pub lora: Vec<[Tensor<f32>; 4]>,
}

impl PreparedLayout {
    pub fn new(layout: &Layout, vocab: &Vocabulary, dims: &[LayerDims], overlap: OverlapMode) -> Result<Self> {
        layout.validate()?;
        let mut regions = Vec::with_capacity(layout.regions.len());
        for r in layout.sorted_regions() {
            r.module.validate(vocab, Some(dims))?;
            regions.push(PreparedRegion {
                placeholder: r.module.placeholder.clone(),
                bbox: r.bbox,
                weight: r.weight,
                context: region_text_embedding(r, &layout.base_prompt, vocab)?,
                lora: r.module.lora.clone(),
            });
        }
        Ok(Self {
            regions,
            base: vocab.encode_text(&layout.base_prompt, &BTreeMap::new())?,
            overlap,
        })
    }

    pub fn bind<T: Float>(&self, g: &mut Graph<T>) -> RegionalRouter {
        RegionalRouter {
            regions: self
                .regions
                .iter()
                .map(|r| BoundRegion {
                    bbox: r.bbox,
                    weight: r.weight,
                    context: g.constant(r.context.tokens.cast()),
                    lora: bind_constant(g, &r.lora),
                })
                .collect(),
            base_context: g.constant(self.base.tokens.cast()),
            overlap: self.overlap,
        }
    }
}

/// Noise prediction with every cross-attention layer routed through the
/// region partition. Returns the prediction and the op counts.
pub fn compose_and_denoise<T: Float>(
    net: &Denoiser<T>,
    z_t: &Tensor<f32>,
    t: usize,
    layout: &PreparedLayout,
) -> Result<(Tensor<f32>, FlopCounter)> {
    let mut g = Graph::<T>::new();
    let mut bd = Binder::new(net.params());
    let router = layout.bind(&mut g);
    let z = g.constant(z_t.cast());
    let out = net.forward(&mut g, &mut bd, z, t, &router)?;
    Ok((g.value(out).cast(), g.flops()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionFile {
    pub module: String,
    pub prompt: String,
    pub bbox: [f64; 4],
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub base_prompt: String,
    pub regions: Vec<RegionFile>,
}

fn default_version() -> u32 {
    LAYOUT_VERSION
}

impl LayoutFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: LayoutFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("layout: {e}")))?;
        if f.version != LAYOUT_VERSION {
            return Err(Error::Version {
                kind: "layout",
                found: f.version,
                expected: LAYOUT_VERSION,
            });
        }
        Ok(f)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Module paths resolved against `dir`.
    pub fn module_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.regions.iter().map(|r| dir.join(&r.module)).collect()
    }

    /// Loads every referenced module and builds a validated layout.
    pub fn resolve(&self, dir: &Path, vocab: &Vocabulary, dims: &[LayerDims]) -> Result<Layout> {
        let mut cache: BTreeMap<PathBuf, Arc<ConceptModule>> = BTreeMap::new();
        let mut regions = Vec::with_capacity(self.regions.len());
        for (r, path) in self.regions.iter().zip(self.module_paths(dir)) {
            let module = match cache.get(&path) {
                Some(m) => m.clone(),
                None => {
                    let m = Arc::new(ConceptModule::load(&path, vocab, Some(dims))?);
                    cache.insert(path.clone(), m.clone());
                    m
                }
            };
            let [x0, y0, x1, y1] = r.bbox;
            regions.push(RegionSpec {
                module,
                bbox: BoundingBox::new(x0, y0, x1, y1)?,
                prompt: tokenize(&r.prompt),
                weight: r.weight,
            });
        }
        let layout = Layout {
            base_prompt: tokenize(&self.base_prompt),
            regions,
        };
        layout.validate()?;
        Ok(layout)
    }
}

/// Reads a layout file and its modules (paths relative to the file).
pub fn load_layout(path: &Path, vocab: &Vocabulary, dims: &[LayerDims]) -> Result<Layout> {
    let f = LayoutFile::read(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    f.resolve(dir, vocab, dims)
}
