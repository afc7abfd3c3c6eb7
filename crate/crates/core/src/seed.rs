//! Seed derivation.
//!
//! One master seed fans out into independent streams by counter:
//! `derive(master, n)` runs one SplitMix64 round over
//! `master + (n + 1) * 0x9E3779B97F4A7C15`. Fixed counters name the streams
//! used by experiments ([`DATA`], [`INIT`], [`SHUFFLE`]); per-epoch and
//! per-batch seeds are derived from those with the epoch or batch index as
//! the counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: u64 = 0;
pub const INIT: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const AUGMENT: u64 = 3;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn derive(master: u64, counter: u64) -> u64 {
    let mut z = master.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The generator every seeded component uses.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
