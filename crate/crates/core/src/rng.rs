//! Counter-based seed derivation.
//!
//! A single master seed fans out into independent streams (split, init,
//! batching, selection, searcher, scheduler). Every random decision draws its
//! generator from `(master, stream, index...)`, so two strategies run with
//! the same master seed see the same splits, initializations and configs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Batch = 3,
    Selection = 4,
    Searcher = 5,
    Scheduler = 6,
    Oracle = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with a sequence of counters.
pub fn derive(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

/// Seed for `stream` at position `counters` under `master`.
pub fn stream_seed(master: u64, stream: Stream, counters: &[u64]) -> u64 {
    derive(derive(master, &[stream as u64]), counters)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, counters: &[u64]) -> ChaCha8Rng {
    rng_from(stream_seed(master, stream, counters))
}
