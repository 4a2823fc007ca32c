//! Seed plumbing. Every random stream in the crate is a ChaCha8 generator
//! keyed by a user seed, a purpose tag and an index, so work split across
//! threads draws the same numbers regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Purpose tags keep independent streams apart for the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Sample = 3,
    Reference = 4,
    Strength = 5,
    Pools = 6,
    Subset = 7,
    Batches = 8,
    Augment = 9,
    Data = 10,
    Identifiers = 11,
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, purpose: Stream, index: u64) -> Rng {
    let key = seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}
