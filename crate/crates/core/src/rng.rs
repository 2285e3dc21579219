//! Counter-keyed random streams.
//!
//! Every stochastic draw in the pipeline is keyed by a tuple of integers
//! (seed, stream tag, instance, step, ...). The key becomes the ChaCha seed
//! directly, so a draw never depends on how many other draws happened before
//! it or on which thread produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags that keep unrelated consumers of one seed apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Augment = 2,
    Shuffle = 3,
    Positive = 4,
    Bank = 5,
    KMeans = 6,
    Blobs = 7,
    Split = 8,
    Probe = 9,
    Subset = 10,
}

pub fn keyed(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
