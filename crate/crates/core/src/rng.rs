//! Seeded random streams.
//!
//! Every stochastic step in the toolkit draws from a ChaCha8 stream whose key
//! is derived from the run seed plus a tuple of integer coordinates (epoch,
//! batch, student, ...). ChaCha is counter-based, so the same key yields the
//! same stream on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels, so unrelated draws sharing a seed never collide.
pub mod domain {
    pub const SPLIT: u64 = 1;
    pub const ABILITY_INIT: u64 = 2;
    pub const THETA_INIT: u64 = 3;
    pub const ENCODER_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const FD_COORDS: u64 = 9;
    pub const OBS_MASK: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A stream keyed by `seed` and an ordered list of coordinates.
pub fn keyed(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &c in coords {
        state = splitmix64(state ^ splitmix64(c.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    let mut key = [0u8; 32];
    let mut word = state;
    for chunk in key.chunks_exact_mut(8) {
        word = splitmix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
