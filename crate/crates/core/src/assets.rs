//! The shipped base checkpoint, embedded at build time.

use crate::container::{sha256_hex, Container};
use crate::denoiser::checkpoint::{MAGIC, VERSION};
use crate::denoiser::Denoiser;
use crate::{Error, Result};

pub static BASE_CHECKPOINT: &[u8] = include_bytes!("../assets/base.mbnt");

/// SHA-256 of [`BASE_CHECKPOINT`].
pub const BASE_SHA256: &str = "2abb23c1b4756cf1a67be2df6197f162af8fe92e1f8685d7e168303bb38a852a";

/// Command that produced the shipped checkpoint.
pub const BASE_RECIPE: &str = "multibooth --seed 0 pretrain-base --steps 6000 --out crates/core/assets/base.mbnt";

/// Decodes the embedded checkpoint after checking its hash.
pub fn base_denoiser() -> Result<Denoiser> {
    let found = sha256_hex(BASE_CHECKPOINT);
    if found != BASE_SHA256 {
        return Err(Error::Checksum {
            what: "embedded base checkpoint".into(),
            expected: BASE_SHA256.into(),
            found,
        });
    }
    Denoiser::from_container(&Container::from_bytes(BASE_CHECKPOINT, MAGIC, VERSION, "checkpoint")?)
}
