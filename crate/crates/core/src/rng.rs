//! Seeded random streams. Every random draw in the toolkit comes from a
//! ChaCha8 generator derived from the single global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers keep unrelated consumers of the same seed apart.
pub mod domain {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const MIXUP: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const DROPOUT: u64 = 7;
    pub const PREVIEW: u64 = 8;
}

pub fn seeded(seed: u64, domain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain);
    rng
}

/// Per-item stream: seed `global ^ index`, so items can be processed in any
/// order or in parallel with identical results.
pub fn item_stream(global: u64, index: u64, domain: u64) -> ChaCha8Rng {
    seeded(global ^ index, domain)
}
