//! Named random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    EnvReset = 2,
    Policy = 3,
    Init = 4,
    Eval = 5,
    ObsNoise = 6,
    Holdout = 7,
    Minibatch = 8,
}

/// Generator for element `index` of `stream` under `root`.
///
/// Streams never overlap; each index owns a disjoint 2^40-word window.
pub fn rng_for(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng.set_word_pos((index as u128) << 40);
    rng
}

/// A 64-bit seed drawn from `rng_for(root, stream, index)`.
pub fn seed_for(root: u64, stream: Stream, index: u64) -> u64 {
    use rand::RngCore;
    rng_for(root, stream, index).next_u64()
}
