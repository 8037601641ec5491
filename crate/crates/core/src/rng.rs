//! Seeded random streams.
//!
//! One master seed drives every random draw in a run. Each consumer gets its
//! own ChaCha stream so that, for example, encryption nonces never perturb the
//! mini-batch order; the plaintext oracle can then replay the exact model
//! trajectory of the secure run.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Shared batch order, known to both parties of a protocol pair.
    Shuffle = 1,
    /// Party C's private target mini-batch sampling.
    TargetSample = 2,
    /// Model initialisation.
    Init = 3,
    /// Key generation.
    Keygen = 4,
    /// Encryption nonces drawn by party C.
    Nonce = 5,
    /// Party C's gradient masks.
    NoiseC = 6,
    /// Active party's logit and gradient masks.
    NoiseP = 7,
    /// Synthetic data generation.
    Data = 8,
    /// Positive-label subsampling.
    Subsample = 9,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Stream keyed by an extra index, e.g. a run phase.
pub fn substream(seed: u64, which: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}
