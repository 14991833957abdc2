//! Frozen random-projection patch pyramid standing in for the image encoder.

use mbtensor::{rng::normal, RngStream, Tensor};

use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
/// Feature width of every visual token.
pub const VISUAL_DIM: usize = 48;
/// Pixel patch side at the finest level.
pub const PATCH: usize = 4;
pub const LEVELS: usize = 4;
/// Token count summed over the pyramid: 64 + 16 + 4 + 1.
pub const VISUAL_TOKENS: usize = 85;
pub const ENCODER_SEED: u64 = 0x4d42_494d;
/// Gray level of the reference image subtracted from descriptors.
pub const NEUTRAL_GRAY: f32 = 0.75;

/// `H×W×3` image with values in `[0, 1]`.
pub type Image = Tensor<f32>;

/// Frozen features `ξ` of one image, `[VISUAL_TOKENS, VISUAL_DIM]`.
/// Rows are ordered finest level first, raster order within a level.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    pub patches: Tensor<f32>,
}

#[derive(Clone, Debug)]
struct Level {
    proj: Tensor<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    levels: Vec<Level>,
    neutral: Vec<f64>,
}

pub fn check_image(img: &Image, height: usize, width: usize) -> Result<()> {
    if img.shape() != [height, width, CHANNELS] {
        return Err(Error::Image(format!("expected {height}×{width}×{CHANNELS}, got {:?}", img.shape())));
    }
    Ok(())
}

/// Nearest-neighbour resampling of an `H×W×C` image.
pub fn resize_nearest(img: &Image, height: usize, width: usize) -> Result<Image> {
    let s = img.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 || height == 0 || width == 0 {
        return Err(Error::Image(format!("cannot resize {s:?} to {height}×{width}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let sy = y * h / height;
        for x in 0..width {
            let sx = x * w / width;
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&img.data()[base..base + c]);
        }
    }
    Ok(Tensor::new([height, width, c], out)?)
}

impl ImageEncoder {
    pub fn standard() -> Self {
        Self::generate(ENCODER_SEED)
    }

    pub fn generate(seed: u64) -> Self {
        let stream = RngStream::new(seed).split("image-encoder");
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let fan_in = if l == 0 { PATCH * PATCH * CHANNELS } else { 4 * VISUAL_DIM };
            let mut rng = stream.split_index("level", l as u64).rng();
            let gain = if l == 0 { 1.0 } else { 1.5 };
            let proj = normal::<f64>(&mut rng, [VISUAL_DIM, fan_in], gain / (fan_in as f64).sqrt());
            let bias = normal::<f64>(&mut rng, [VISUAL_DIM], 0.5).into_data();
            levels.push(Level { proj, bias });
        }
        let mut enc = Self {
            levels,
            neutral: Vec::new(),
        };
        let gray = Tensor::full([IMAGE_SIZE, IMAGE_SIZE, CHANNELS], NEUTRAL_GRAY);
        enc.neutral = enc.level_means(&enc.features(&gray));
        enc
    }

    fn project(&self, level: &Level, input: &[f64], out: &mut Vec<f64>) {
        let fan_in = input.len();
        for o in 0..VISUAL_DIM {
            let row = &level.proj.data()[o * fan_in..(o + 1) * fan_in];
            let s: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            out.push((s + level.bias[o]).tanh());
        }
    }

    /// Per-level token grids, finest first.
    fn features(&self, img: &Image) -> Vec<(usize, Vec<f64>)> {
        let n = IMAGE_SIZE / PATCH;
        let mut levels = Vec::with_capacity(LEVELS);
        let mut tokens = Vec::with_capacity(n * n * VISUAL_DIM);
        let mut patch = Vec::with_capacity(PATCH * PATCH * CHANNELS);
        for py in 0..n {
            for px in 0..n {
                patch.clear();
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let base = ((py * PATCH + y) * IMAGE_SIZE + px * PATCH + x) * CHANNELS;
                        patch.extend(img.data()[base..base + CHANNELS].iter().map(|&v| v as f64));
                    }
                }
                self.project(&self.levels[0], &patch, &mut tokens);
            }
        }
        levels.push((n, tokens));
        for l in 1..LEVELS {
            let (side, prev) = levels.last().expect("previous level");
            let side = *side;
            let half = side / 2;
            let mut next = Vec::with_capacity(half * half * VISUAL_DIM);
            let mut merged = Vec::with_capacity(4 * VISUAL_DIM);
            for y in 0..half {
                for x in 0..half {
                    merged.clear();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let t = (2 * y + dy) * side + 2 * x + dx;
                        merged.extend_from_slice(&prev[t * VISUAL_DIM..(t + 1) * VISUAL_DIM]);
                    }
                    self.project(&self.levels[l], &merged, &mut next);
                }
            }
            levels.push((half, next));
        }
        levels
    }

    fn level_means(&self, levels: &[(usize, Vec<f64>)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(LEVELS * VISUAL_DIM);
        for (side, tokens) in levels {
            let count = (side * side) as f64;
            for j in 0..VISUAL_DIM {
                let s: f64 = tokens.iter().skip(j).step_by(VISUAL_DIM).sum();
                out.push(s / count);
            }
        }
        out
    }

    pub fn encode_image(&self, img: &Image) -> Result<VisualEmbedding> {
        check_image(img, IMAGE_SIZE, IMAGE_SIZE)?;
        let data: Vec<f32> = self
            .features(img)
            .into_iter()
            .flat_map(|(_, t)| t.into_iter().map(|v| v as f32))
            .collect();
        Ok(VisualEmbedding {
            patches: Tensor::new([VISUAL_TOKENS, VISUAL_DIM], data)?,
        })
    }

    /// Global descriptor used for fidelity scoring: per-level mean features
    /// minus those of a uniform gray image. Any size is accepted; the image
    /// is resampled to the encoder resolution first.
    pub fn descriptor(&self, img: &Image) -> Result<Vec<f64>> {
        let img = if img.shape()[..2] == [IMAGE_SIZE, IMAGE_SIZE] {
            img.clone()
        } else {
            resize_nearest(img, IMAGE_SIZE, IMAGE_SIZE)?
        };
        check_image(&img, IMAGE_SIZE, IMAGE_SIZE)?;
        let means = self.level_means(&self.features(&img));
        Ok(means.iter().zip(&self.neutral).map(|(a, b)| a - b).collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
