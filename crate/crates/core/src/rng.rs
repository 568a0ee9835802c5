//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator seeded with
//! the experiment's root seed. Independent streams are selected with
//! ChaCha's 64-bit stream counter: `stream = replicate * 4 + tag`, so the
//! plant, controller and attacker of each replicate never share randomness
//! and any replicate can be reproduced on its own, in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Role of a stream within one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Plant = 0,
    Controller = 1,
    Attacker = 2,
    Auxiliary = 3,
}

/// Root seed plus replicate index; identifies all streams of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeed {
    pub root: u64,
    pub replicate: u64,
}

impl StreamSeed {
    pub fn new(root: u64, replicate: u64) -> Self {
        Self { root, replicate }
    }

    pub fn rng(&self, tag: StreamTag) -> ChaCha8Rng {
        stream(self.root, self.replicate, tag)
    }
}

/// Generator for `(root_seed, replicate, tag)`.
pub fn stream(root_seed: u64, replicate: u64, tag: StreamTag) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(replicate.wrapping_mul(4).wrapping_add(tag as u64));
    rng
}

/// Draws an index from a probability row by inversion.
///
/// Zero-probability entries are never returned, even when rounding leaves
/// the cumulative sum slightly below the uniform draw.
pub fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
