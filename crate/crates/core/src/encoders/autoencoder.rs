//! Fixed linear latent codec: each 4×4 RGB patch is projected onto four
//! orthonormal directions (three per-channel means and a luminance
//! x-gradient). Decoding is the transposed map.

use mbtensor::Tensor;

use super::image::{check_image, Image, CHANNELS, IMAGE_SIZE, PATCH};
use crate::{Error, Result};

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = IMAGE_SIZE / PATCH;
/// Scale applied on encode; decode divides it back out.
pub const LATENT_SCALE: f32 = 0.5;

const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

/// Latent tensor `[c, h, w]`.
pub type Latent = Tensor<f32>;

#[derive(Clone, Debug)]
pub struct LatentCodec {
    /// `[LATENT_CHANNELS, PATCH_DIM]`, orthonormal rows.
    basis: Vec<f32>,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self::new()
    }
}

impl LatentCodec {
    pub fn new() -> Self {
        let mut basis = vec![0.0f64; LATENT_CHANNELS * PATCH_DIM];
        let n = (PATCH * PATCH) as f64;
        for y in 0..PATCH {
            for x in 0..PATCH {
                let p = y * PATCH + x;
                for c in 0..CHANNELS {
                    basis[c * PATCH_DIM + p * CHANNELS + c] = 1.0 / n.sqrt();
                    basis[3 * PATCH_DIM + p * CHANNELS + c] = x as f64 - (PATCH as f64 - 1.0) / 2.0;
                }
            }
        }
        let g = &mut basis[3 * PATCH_DIM..];
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.iter_mut().for_each(|v| *v /= norm);
        Self {
            basis: basis.into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn basis(&self) -> &[f32] {
        &self.basis
    }

    pub fn encode(&self, img: &Image) -> Result<Latent> {
        check_image(img, IMAGE_SIZE, IMAGE_SIZE)?;
        let mut z = vec![0.0f32; LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE];
        for py in 0..LATENT_SIZE {
            for px in 0..LATENT_SIZE {
                for k in 0..LATENT_CHANNELS {
                    let row = &self.basis[k * PATCH_DIM..(k + 1) * PATCH_DIM];
                    let mut s = 0.0f64;
                    for y in 0..PATCH {
                        for x in 0..PATCH {
                            let base = ((py * PATCH + y) * IMAGE_SIZE + px * PATCH + x) * CHANNELS;
                            let p = (y * PATCH + x) * CHANNELS;
                            for c in 0..CHANNELS {
                                s += row[p + c] as f64 * img.data()[base + c] as f64;
                            }
                        }
                    }
                    z[(k * LATENT_SIZE + py) * LATENT_SIZE + px] = (LATENT_SCALE as f64 * s) as f32;
                }
            }
        }
        Ok(Tensor::new([LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE], z)?)
    }

    /// Decodes without clamping; callers clamp before quantizing.
    pub fn decode(&self, z: &Latent) -> Result<Image> {
        if z.shape() != [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE] {
            return Err(Error::Image(format!(
                "latent must be {LATENT_CHANNELS}×{LATENT_SIZE}×{LATENT_SIZE}, got {:?}",
                z.shape()
            )));
        }
        let mut img = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE * CHANNELS];
        for py in 0..LATENT_SIZE {
            for px in 0..LATENT_SIZE {
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let base = ((py * PATCH + y) * IMAGE_SIZE + px * PATCH + x) * CHANNELS;
                        let p = (y * PATCH + x) * CHANNELS;
                        for c in 0..CHANNELS {
                            let mut s = 0.0f64;
                            for k in 0..LATENT_CHANNELS {
                                let zk = z.data()[(k * LATENT_SIZE + py) * LATENT_SIZE + px] as f64;
                                s += self.basis[k * PATCH_DIM + p + c] as f64 * zk;
                            }
                            img[base + c] = (s / LATENT_SCALE as f64) as f32;
                        }
                    }
                }
            }
        }
        Ok(Tensor::new([IMAGE_SIZE, IMAGE_SIZE, CHANNELS], img)?)
    }
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Image(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn clamp_unit(img: &Image) -> Image {
    img.map(|v| v.clamp(0.0, 1.0))
}
