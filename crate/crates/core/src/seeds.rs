//! Seed streams.
//!
//! Every random decision in a run is derived from one master seed. Stream `k`
//! is the `k`-th output (1-based) of a SplitMix64 generator seeded with the
//! master seed, so adding a new stream never perturbs the existing ones.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Named consumers of the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Corpus = 1,
    Split = 2,
    Balance = 3,
    Init = 4,
    Augment = 5,
    Order = 6,
}

/// Seed for `stream`, derived from `master`.
pub fn derive(master: u64, stream: Stream) -> u64 {
    nth(master, stream as u64)
}

/// The `n`-th (1-based) SplitMix64 output for `seed`.
pub fn nth(seed: u64, n: u64) -> u64 {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut out = 0;
    for _ in 0..n {
        out = rng.next_u64();
    }
    out
}

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}
