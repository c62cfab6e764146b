//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a root
//! seed, an index (replicate, iteration, sample) and a purpose tag. Two
//! different `(index, tag)` pairs give statistically independent streams, so
//! work items can run on any worker in any order and still reproduce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Latents,
    Weights,
    PreviousBatch,
    Data,
    Replicate,
    Custom(u64),
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Latents => 0x4c41_5445_4e54_5331,
            Purpose::Weights => 0x5745_4947_4854_5332,
            Purpose::PreviousBatch => 0x5052_4556_4241_5433,
            Purpose::Data => 0x4441_5441_5345_5434,
            Purpose::Replicate => 0x5245_504c_4943_4135,
            Purpose::Custom(c) => c.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x4355_5354_4f4d_5f36,
        }
    }
}

/// Identifies the stream that produced a batch; redrawing from it reproduces the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedRecord {
    pub root: u64,
    pub index: u64,
    pub purpose: Purpose,
}

impl SeedRecord {
    pub fn new(root: u64, index: u64, purpose: Purpose) -> Self {
        Self { root, index, purpose }
    }

    /// The 64-bit key fed to the generator.
    pub fn key(&self) -> u64 {
        derive_seed(self.root, self.index, self.purpose)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key())
    }

    /// A child record of the same root, used to chain derivations
    /// (e.g. replicate -> per-sample particle filter streams).
    pub fn child(&self, index: u64, purpose: Purpose) -> SeedRecord {
        SeedRecord::new(self.key(), index, purpose)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a root seed, an index and a purpose tag into one stream key.
pub fn derive_seed(root: u64, index: u64, purpose: Purpose) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ index) ^ purpose.code())
}

/// Shorthand for `SeedRecord::new(root, index, purpose).rng()`.
pub fn stream(root: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    SeedRecord::new(root, index, purpose).rng()
}
