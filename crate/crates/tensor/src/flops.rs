//! Per-scope matmul FLOP accounting.

use std::ops::AddAssign;

/// What part of a model an op belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Other,
    SelfAttention,
    CrossAttention,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Other, Scope::SelfAttention, Scope::CrossAttention];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Other => "other",
            Scope::SelfAttention => "self_attention",
            Scope::CrossAttention => "cross_attention",
        }
    }
}

/// Counts `2·m·k·n` for every forward matrix product, bucketed by scope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: [u64; 3],
}

impl FlopCounter {
    pub fn record(&mut self, scope: Scope, flops: u64) {
        self.counts[scope.index()] += flops;
    }

    pub fn get(&self, scope: Scope) -> u64 {
        self.counts[scope.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

impl AddAssign for FlopCounter {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.counts.iter_mut().zip(rhs.counts) {
            *a += b;
        }
    }
}

/// FLOPs of an `m×k` by `k×n` product.
pub const fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}
