//! The plug-and-play single-concept artifact (magic `MBCM`).

use std::path::Path;

use mbtensor::Tensor;
use serde::{Deserialize, Serialize};

use super::acn::acn_tensor;
use crate::container::Container;
use crate::denoiser::lora::{check_rank, LayerDims};
use crate::encoders::vocab::{is_placeholder, Vocabulary};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MBCM";
pub const FORMAT_VERSION: u32 = 1;
/// Tolerance of the stored-norm check on load.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub concept_id: String,
    pub seed: u64,
    pub steps: usize,
    pub lambda: f64,
    pub lr: f64,
    pub rank: usize,
    pub format_version: u32,
}

/// `[k.a, k.b, v.a, v.b]` for one adapted layer; `a[r×k]`, `b[d×r]`.
pub type LayerFactors = [Tensor<f32>; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptModule {
    pub placeholder: String,
    pub class_noun: String,
    pub embedding_raw: Tensor<f32>,
    pub embedding_final: Tensor<f32>,
    pub lora: Vec<LayerFactors>,
    pub meta: ModuleMeta,
}

fn norm(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl ConceptModule {
    /// Snapshots a trained state. `v̂` is recomputed from `embedding_raw`.
    pub fn build(
        placeholder: &str,
        class_noun: &str,
        embedding_raw: Tensor<f32>,
        lora: Vec<Option<LayerFactors>>,
        vocab: &Vocabulary,
        meta: ModuleMeta,
    ) -> Result<Self> {
        let target = vocab.norm(class_noun)?;
        let embedding_final = acn_tensor(&embedding_raw, target)?;
        let lora = lora
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::validation("LoRA factors present", format!("layer {i} has none"))))
            .collect::<Result<Vec<_>>>()?;
        let m = Self {
            placeholder: placeholder.to_string(),
            class_noun: class_noun.to_string(),
            embedding_raw,
            embedding_final,
            lora,
            meta,
        };
        m.validate(vocab, None)?;
        Ok(m)
    }

    pub fn rank(&self) -> usize {
        self.meta.rank
    }

    pub fn layer_dims(&self) -> Vec<LayerDims> {
        self.lora.iter().map(|l| (l[1].shape()[0], l[0].shape()[1])).collect()
    }

    /// `d + Σ 2·r·(d_layer + k_layer)`.
    pub fn num_params(&self) -> usize {
        self.embedding_final.numel() + self.lora.iter().flat_map(|l| l.iter()).map(Tensor::numel).sum::<usize>()
    }

    pub fn final_norm(&self) -> f64 {
        norm(&self.embedding_final)
    }

    pub fn raw_norm(&self) -> f64 {
        norm(&self.embedding_raw)
    }

    /// Checks every stored invariant; `dims` optionally pins the expected
    /// adapted-layer shapes.
    pub fn validate(&self, vocab: &Vocabulary, dims: Option<&[LayerDims]>) -> Result<()> {
        if !is_placeholder(&self.placeholder) {
            return Err(Error::validation(
                "placeholder token",
                format!("{:?} does not end in '*'", self.placeholder),
            ));
        }
        if vocab.contains(&self.placeholder) {
            return Err(Error::validation(
                "placeholder token",
                format!("{:?} is a vocabulary word", self.placeholder),
            ));
        }
        let d = vocab.dim();
        for (name, t) in [("embedding_raw", &self.embedding_raw), ("embedding_final", &self.embedding_final)] {
            if t.shape() != [d] || !t.all_finite() {
                return Err(Error::validation(
                    "embedding shape",
                    format!("{name} has shape {:?}, expected [{d}]", t.shape()),
                ));
            }
        }
        let target = vocab.norm(&self.class_noun)?;
        let found = self.final_norm();
        if (found - target).abs() > NORM_TOLERANCE {
            return Err(Error::validation(
                "final embedding norm equals class-noun norm",
                format!("‖v̂‖ = {found}, ‖{}‖ = {target}", self.class_noun),
            ));
        }
        let (rn, fnorm) = (self.raw_norm(), found);
        if rn == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let dot: f64 = self
            .embedding_raw
            .data()
            .iter()
            .zip(self.embedding_final.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        if (dot / (rn * fnorm) - 1.0).abs() > 1e-5 {
            return Err(Error::validation(
                "final embedding parallel to raw",
                format!("cosine {}", dot / (rn * fnorm)),
            ));
        }
        if self.meta.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                kind: "concept module",
                found: self.meta.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let r = self.meta.rank;
        if let Some(dims) = dims {
            if dims.len() != self.lora.len() {
                return Err(Error::validation(
                    "LoRA layer count",
                    format!("{} layers, denoiser has {}", self.lora.len(), dims.len()),
                ));
            }
        }
        for (i, [ka, kb, va, vb]) in self.lora.iter().enumerate() {
            let dl = kb.shape().first().copied().unwrap_or(0);
            let kl = ka.shape().get(1).copied().unwrap_or(0);
            let ok = ka.shape() == [r, kl] && va.shape() == [r, kl] && kb.shape() == [dl, r] && vb.shape() == [dl, r];
            if !ok {
                return Err(Error::validation(
                    "LoRA factor shapes",
                    format!(
                        "layer {i}: {:?} {:?} {:?} {:?} for rank {r}",
                        ka.shape(),
                        kb.shape(),
                        va.shape(),
                        vb.shape()
                    ),
                ));
            }
            check_rank(r, (dl, kl)).map_err(|e| Error::validation("LoRA rank", e.to_string()))?;
            if let Some(dims) = dims {
                if dims[i] != (dl, kl) {
                    return Err(Error::validation(
                        "LoRA layer dims",
                        format!("layer {i}: ({dl}, {kl}) vs {:?}", dims[i]),
                    ));
                }
            }
            if ![ka, kb, va, vb].iter().all(|t| t.all_finite()) {
                return Err(Error::validation("LoRA factors finite", format!("layer {i}")));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = vec![
            ("embedding_raw".to_string(), self.embedding_raw.clone()),
            ("embedding_final".to_string(), self.embedding_final.clone()),
        ];
        for (i, l) in self.lora.iter().enumerate() {
            for (name, t) in ["k.a", "k.b", "v.a", "v.b"].iter().zip(l) {
                tensors.push((format!("lora.{i}.{name}"), t.clone().with_requires_grad(false)));
            }
        }
        Container {
            magic: MAGIC,
            version: FORMAT_VERSION,
            metadata: serde_json::json!({
                "placeholder": self.placeholder,
                "class_noun": self.class_noun,
                "layers": self.lora.len(),
                "meta": self.meta,
            }),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    /// Parses and validates; no partially-built module escapes on error.
    pub fn from_bytes(bytes: &[u8], vocab: &Vocabulary, dims: Option<&[LayerDims]>) -> Result<Self> {
        let c = Container::from_bytes(bytes, MAGIC, FORMAT_VERSION, "concept module")?;
        let md = &c.metadata;
        let text = |k: &str| {
            md[k]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("module metadata is missing {k:?}")))
        };
        let layers = md["layers"]
            .as_u64()
            .ok_or_else(|| Error::Parse("module metadata is missing \"layers\"".into()))? as usize;
        let meta: ModuleMeta = serde_json::from_value(md["meta"].clone()).map_err(|e| Error::Parse(format!("module meta: {e}")))?;
        if c.tensors.len() != 2 + 4 * layers {
            return Err(Error::Parse(format!("{} tensors for {layers} layers", c.tensors.len())));
        }
        let lora = (0..layers)
            .map(|i| -> Result<LayerFactors> {
                let get = |n: &str| c.tensor(&format!("lora.{i}.{n}")).cloned();
                Ok([get("k.a")?, get("k.b")?, get("v.a")?, get("v.b")?])
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Self {
            placeholder: text("placeholder")?,
            class_noun: text("class_noun")?,
            embedding_raw: c.tensor("embedding_raw")?.clone(),
            embedding_final: c.tensor("embedding_final")?.clone(),
            lora,
            meta,
        };
        m.validate(vocab, dims)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path, vocab: &Vocabulary, dims: Option<&[LayerDims]>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, vocab, dims)
    }

    /// Norm diagnostics: `(‖v‖, ‖v̂‖, ‖c_l‖)`.
    pub fn norm_report(&self, vocab: &Vocabulary) -> Result<(f64, f64, f64)> {
        Ok((self.raw_norm(), self.final_norm(), vocab.norm(&self.class_noun)?))
    }
}
