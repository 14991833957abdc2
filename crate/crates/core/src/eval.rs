//! Generation pipeline, region-crop fidelity scoring and the concept-count
//! benchmark.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use mbtensor::rng::normal;
use mbtensor::{FlopCounter, RngStream, Scope, Tensor};
use serde::{Deserialize, Serialize};

use crate::concept::module::FORMAT_VERSION;
use crate::concept::{ConceptModule, ModuleMeta};
use crate::denoiser::lora::{check_rank, LayerDims};
use crate::denoiser::{Denoiser, NoiseSchedule};
use crate::encoders::image::IMAGE_SIZE;
use crate::encoders::vocab::CLASS_NOUNS;
use crate::encoders::{cosine, Image, ImageEncoder, LatentCodec, PromptEmbedding, Vocabulary};
use crate::rcm::{compose_and_denoise, BoundingBox, Layout, OverlapMode, PreparedLayout, RegionSpec};
use crate::sampler::{decode_image, sample_latent, SampleConfig};
use crate::{Error, Result};

/// Frozen pieces shared by every generation call. Read-only, so one
/// pipeline can serve concurrent callers.
pub struct Pipeline<'a> {
    pub net: &'a Denoiser,
    pub vocab: &'a Vocabulary,
    pub codec: &'a LatentCodec,
    pub schedule: &'a NoiseSchedule,
}

pub struct Generated {
    pub image: Image,
    pub latent: Tensor<f32>,
    /// Op counts of one conditional forward pass.
    pub flops: FlopCounter,
}

impl Pipeline<'_> {
    pub fn latent_shape(&self) -> [usize; 3] {
        let c = self.net.config();
        [c.latent_channels, c.latent_size, c.latent_size]
    }

    pub fn prepare(&self, layout: &Layout, overlap: OverlapMode) -> Result<PreparedLayout> {
        PreparedLayout::new(layout, self.vocab, &self.net.config().cross_dims(), overlap)
    }

    /// Guided DDIM from the seeded start, conditional branch routed through
    /// the layout and the unconditional branch on the null prompt.
    pub fn generate(&self, layout: &PreparedLayout, cfg: &SampleConfig) -> Result<Generated> {
        let null = PromptEmbedding::null(self.vocab.dim());
        let mut flops = None;
        let latent = sample_latent(
            cfg,
            self.schedule,
            self.codec,
            &self.latent_shape(),
            |z, t| {
                let (eps, f) = compose_and_denoise(self.net, z, t, layout)?;
                flops.get_or_insert(f);
                Ok(eps)
            },
            |z, t| self.net.predict(z, t, &null.tokens, None),
        )?;
        Ok(Generated {
            image: decode_image(self.codec, &latent)?,
            latent,
            flops: flops.unwrap_or_default(),
        })
    }
}

/// Pixel crop of a box, using the same outward rounding as the latent grid.
pub fn region_crop(img: &Image, bbox: &BoundingBox) -> Result<Image> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let cb = bbox.to_cells(h, w);
    let (ch, cw) = (cb.r1 - cb.r0, cb.c1 - cb.c0);
    Ok(Tensor::from_fn([ch, cw, 3], |i| {
        let (y, x, c) = (i / (cw * 3), (i / 3) % cw, i % 3);
        img.data()[((cb.r0 + y) * w + cb.c0 + x) * 3 + c]
    }))
}

/// Mean cosine of a descriptor against a reference set, in `[-1, 1]`.
pub fn mean_similarity(d: &[f64], references: &[Vec<f64>]) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    references.iter().map(|r| cosine(d, r)).sum::<f64>() / references.len() as f64
}

pub fn reference_features(encoder: &ImageEncoder, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|i| encoder.descriptor(i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub layout: String,
    pub seed: u64,
    pub placeholder: String,
    pub concept_id: String,
    /// Similarity of the region crop to each reference set, by concept id.
    pub scores: BTreeMap<String, f64>,
}

impl FidelityRow {
    pub fn own(&self) -> f64 {
        self.scores.get(&self.concept_id).copied().unwrap_or(0.0)
    }

    /// Own score minus the mean over the other reference sets.
    pub fn margin(&self) -> Option<f64> {
        let others: Vec<f64> = self
            .scores
            .iter()
            .filter(|(k, _)| **k != self.concept_id)
            .map(|(_, v)| *v)
            .collect();
        if others.is_empty() {
            return None;
        }
        Some(self.own() - others.iter().sum::<f64>() / others.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub concepts: usize,
    pub seconds_per_forward: f64,
    pub region_cells: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRow {
    pub self_attention: u64,
    pub cross_attention: u64,
    pub other: u64,
}

impl From<&FlopCounter> for FlopRow {
    fn from(f: &FlopCounter) -> Self {
        Self {
            self_attention: f.get(Scope::SelfAttention),
            cross_attention: f.get(Scope::CrossAttention),
            other: f.get(Scope::Other),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fidelity: Vec<FidelityRow>,
    pub timing: Vec<TimingRow>,
    /// Per-forward op counts keyed by layout name or concept count.
    pub flops: BTreeMap<String, FlopRow>,
}

impl EvalReport {
    /// Mean margin of the rows whose layout name matches `layout`.
    pub fn mean_margin(&self, layout: Option<&str>) -> Option<f64> {
        let m: Vec<f64> = self
            .fidelity
            .iter()
            .filter(|r| layout.map_or(true, |l| r.layout == l))
            .filter_map(FidelityRow::margin)
            .collect();
        (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
    }
}

/// Generates every layout for every seed and scores each region crop
/// against every reference set.
pub fn evaluate(
    pipe: &Pipeline<'_>,
    encoder: &ImageEncoder,
    layouts: &[(String, Layout)],
    references: &BTreeMap<String, Vec<Vec<f64>>>,
    seeds: &[u64],
    cfg: &SampleConfig,
    overlap: OverlapMode,
) -> Result<EvalReport> {
    if layouts.is_empty() {
        return Err(Error::Config("evaluation needs at least one layout".into()));
    }
    let mut report = EvalReport::default();
    for (name, layout) in layouts {
        for r in &layout.regions {
            if !references.contains_key(&r.module.meta.concept_id) {
                return Err(Error::Config(format!("no references for concept {:?}", r.module.meta.concept_id)));
            }
        }
        let prepared = pipe.prepare(layout, overlap)?;
        for &seed in seeds {
            let out = pipe.generate(&prepared, &SampleConfig { seed, ..cfg.clone() })?;
            report.flops.entry(name.clone()).or_insert_with(|| FlopRow::from(&out.flops));
            for r in layout.sorted_regions() {
                let d = encoder.descriptor(&region_crop(&out.image, &r.bbox)?)?;
                report.fidelity.push(FidelityRow {
                    layout: name.clone(),
                    seed,
                    placeholder: r.module.placeholder.clone(),
                    concept_id: r.module.meta.concept_id.clone(),
                    scores: references.iter().map(|(k, refs)| (k.clone(), mean_similarity(&d, refs))).collect(),
                });
            }
        }
    }
    Ok(report)
}

/// Boxes used by the benchmark: two halves, then two more halves across.
pub const BENCH_BOXES: [[f64; 4]; 4] = [
    [0.0, 0.0, 0.5, 1.0],
    [0.5, 0.0, 1.0, 1.0],
    [0.0, 0.0, 1.0, 0.5],
    [0.0, 0.5, 1.0, 1.0],
];

/// Layout with the first `n` modules placed on the benchmark boxes.
pub fn bench_layout(modules: &[Arc<ConceptModule>], n: usize) -> Result<Layout> {
    if n == 0 || n > modules.len() || n > BENCH_BOXES.len() {
        return Err(Error::Config(format!(
            "benchmark needs 1..={} concepts, got {n} of {}",
            BENCH_BOXES.len(),
            modules.len()
        )));
    }
    let regions = modules[..n]
        .iter()
        .zip(BENCH_BOXES)
        .map(|(m, [x0, y0, x1, y1])| {
            Ok(RegionSpec {
                module: m.clone(),
                bbox: BoundingBox::new(x0, y0, x1, y1)?,
                prompt: vec!["a".into(), m.placeholder.clone(), m.class_noun.clone()],
                weight: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Layout {
        base_prompt: vec!["a".into(), "photo".into()],
        regions,
    })
}

/// Times one conditional forward pass per concept count (best of
/// `repeats`) and records its op counts.
pub fn bench(pipe: &Pipeline<'_>, modules: &[Arc<ConceptModule>], counts: &[usize], repeats: usize, seed: u64) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let z = crate::sampler::initial_latent(seed, &pipe.latent_shape());
    let t = pipe.schedule.len() / 2;
    for &n in counts {
        let layout = bench_layout(modules, n)?;
        let prepared = pipe.prepare(&layout, OverlapMode::default())?;
        let (h, w) = pipe.net.config().grid(0);
        let cells = prepared.regions.iter().map(|r| r.bbox.to_cells(h, w).area()).sum();
        let mut best = f64::INFINITY;
        let mut flops = FlopCounter::default();
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let (_, f) = compose_and_denoise(pipe.net, &z, t, &prepared)?;
            best = best.min(start.elapsed().as_secs_f64());
            flops = f;
        }
        report.timing.push(TimingRow {
            concepts: n,
            seconds_per_forward: best,
            region_cells: cells,
        });
        report.flops.insert(n.to_string(), FlopRow::from(&flops));
    }
    Ok(report)
}

/// Untrained stand-in modules with random factors, for benchmarking when no
/// trained modules are at hand. Placeholders are `S1*`, `S2*`, ….
pub fn synthetic_modules(vocab: &Vocabulary, dims: &[LayerDims], n: usize, rank: usize, seed: u64) -> Result<Vec<Arc<ConceptModule>>> {
    let stream = RngStream::new(seed).split("synthetic-modules");
    (0..n)
        .map(|i| {
            let mut rng = stream.split(&i.to_string()).rng();
            let noun = CLASS_NOUNS[i % CLASS_NOUNS.len()];
            let raw = normal(&mut rng, [vocab.dim()], 1.0);
            let lora = dims
                .iter()
                .map(|&(d, k)| {
                    check_rank(rank, (d, k))?;
                    let a = 1.0 / (rank as f64).sqrt();
                    Ok(Some([
                        normal(&mut rng, [rank, k], a),
                        normal(&mut rng, [d, rank], 0.01),
                        normal(&mut rng, [rank, k], a),
                        normal(&mut rng, [d, rank], 0.01),
                    ]))
                })
                .collect::<Result<Vec<_>>>()?;
            let meta = ModuleMeta {
                concept_id: format!("synthetic_{i}"),
                seed,
                steps: 0,
                lambda: 0.0,
                lr: 0.0,
                rank,
                format_version: FORMAT_VERSION,
            };
            Ok(Arc::new(ConceptModule::build(
                &format!("S{}*", i + 1),
                noun,
                raw,
                lora,
                vocab,
                meta,
            )?))
        })
        .collect()
}

/// Resizes a crop the way the scorer does, for inspection.
pub fn scorer_view(img: &Image) -> Result<Image> {
    crate::encoders::image::resize_nearest(img, IMAGE_SIZE, IMAGE_SIZE)
}
