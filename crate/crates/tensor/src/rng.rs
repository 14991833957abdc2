//! Named, splittable random streams.
//!
//! A stream is a 256-bit key. Splitting hashes the key with a label, and a
//! stream materializes as a ChaCha8 generator keyed by it, so draws depend
//! only on the root seed and the chain of labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: [u8; 32],
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"multibooth-rng/v1");
        h.update(seed.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn split(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn split_index(&self, label: &str, index: u64) -> Self {
        self.split(label).split(&index.to_string())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key)
    }
}

/// Tensor of i.i.d. `N(0, std²)` draws.
pub fn normal<T: Float>(rng: &mut impl rand::Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}
