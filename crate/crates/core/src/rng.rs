//! Counter-based keyed randomness.
//!
//! A generator is derived from a tuple of keys rather than advanced through a
//! shared stream, so any frame or batch can be regenerated independently of
//! iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Folds a sequence of 64-bit keys into one seed.
pub fn mix(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5851_f42d_4c95_7f2d, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stream tags keep unrelated consumers of the same (seed, clip, frame) apart.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Noise = 1,
    BrightnessSign = 2,
    ColorGains = 3,
    ExtractorWeights = 4,
    ModelInit = 5,
    Dropout = 6,
    Sampling = 7,
    Synth = 8,
}

pub fn keyed(seed: u64, stream: Stream, clip_id: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, stream as u64, hash_str(clip_id), index]))
}

pub fn keyed_u64(seed: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    let mut keys = vec![seed, stream as u64];
    keys.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(mix(&keys))
}
