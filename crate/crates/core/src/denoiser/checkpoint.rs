//! Base checkpoint files (magic `MBNT`).

use std::path::Path;

use mbtensor::Tensor;

use super::net::{Denoiser, DenoiserConfig};
use crate::container::{sha256_hex, tensors_sha256, Container};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MBNT";
pub const VERSION: u32 = 1;

impl Denoiser<f32> {
    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        Container {
            magic: MAGIC,
            version: VERSION,
            metadata: serde_json::json!({ "config": self.config(), "training": extra }),
            tensors: self
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_container(extra).write(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg: DenoiserConfig =
            serde_json::from_value(c.metadata["config"].clone()).map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
        let mut net = Denoiser::init(cfg, 0)?;
        if c.tensors.len() != net.params().len() {
            return Err(Error::validation(
                "checkpoint tensor count",
                format!("{} tensors, architecture has {}", c.tensors.len(), net.params().len()),
            ));
        }
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            let name = net.params().name(id).to_string();
            let t = c.tensor(&name)?;
            if t.shape() != net.params().get(id).shape() {
                return Err(Error::validation(
                    "checkpoint tensor shape",
                    format!("{name}: {:?} vs {:?}", t.shape(), net.params().get(id).shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::validation("checkpoint finite", name));
            }
            *net.params_mut().get_mut(id) = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, MAGIC, VERSION, "checkpoint")?)
    }

    /// Hash of every parameter name, shape and value.
    pub fn weights_sha256(&self) -> String {
        tensors_sha256(self.params().iter())
    }
}

/// Loads a checkpoint after checking the file hash against `expected`.
pub fn load_verified(path: &Path, expected: &str) -> Result<Denoiser> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = sha256_hex(&bytes);
    if found != expected {
        return Err(Error::Checksum {
            what: path.display().to_string(),
            expected: expected.to_string(),
            found,
        });
    }
    Denoiser::from_container(&Container::from_bytes(&bytes, MAGIC, VERSION, "checkpoint")?)
}
