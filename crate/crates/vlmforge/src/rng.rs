//! Counter-based random stream derivation.
//!
//! Every stochastic choice in the pipeline draws from a stream derived from the
//! run seed plus the integers that identify the work item (image id, box index,
//! question type, sample index, a purpose tag, ...). Streams are therefore
//! independent of batching, worker count, and resume points: the same work item
//! always sees the same randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated consumers of the same id tuple decorrelated.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const MICROWORLD: u64 = 2;
    pub const DC_SAMPLE: u64 = 3;
    pub const QA_SAMPLE: u64 = 4;
    pub const TRAIN_MASK: u64 = 5;
    pub const DATA_ORDER: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds an ordered tuple of identifiers into a single 64-bit stream seed.
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64; // pi, as an arbitrary non-zero start
    for (i, p) in parts.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(i as u64 + 1)));
    }
    h
}

/// A deterministic RNG for the stream identified by `parts`.
pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(parts))
}

/// FNV-1a over the string bytes: turns names (parameter names, config text)
/// into stream-id components or fingerprints.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
