//! Seeded randomness. Every random draw in the crate flows from an explicit
//! `u64` seed through [`seeded`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose, so adding draws to one consumer
/// does not shift another consumer's sequence.
pub fn stream(seed: u64, purpose: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub const STREAM_TOKENS: u64 = 1;
pub const STREAM_ROUTING: u64 = 2;
pub const STREAM_PARAMS: u64 = 3;
pub const STREAM_UPSTREAM: u64 = 4;
