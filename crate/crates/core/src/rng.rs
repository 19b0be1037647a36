//! Deterministic named RNG substreams.
//!
//! A run owns a single `u64` seed. Every consumer derives its own stream from
//! (seed, name) or (seed, name, index), so streams never share state and the
//! draw sequence of one consumer cannot shift another's. Indexed streams make
//! per-step state reconstructible: resuming training at step `s` reseeds from
//! (seed, "train", s) and produces the exact draws of an uninterrupted run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the byte string; stable across platforms.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream derived from (seed, name).
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ fnv1a(name.as_bytes())))
}

/// Stream derived from (seed, name, index). Used where each unit of work
/// (training step, episode, sweep cell) must be independently reseedable.
pub fn stream_indexed(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ fnv1a(name.as_bytes())).wrapping_add(index)))
}
