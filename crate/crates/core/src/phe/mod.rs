//! Additively homomorphic encryption (Paillier) over fixed-point reals.
//!
//! Ciphertexts carry the exponent of the fixed-point value they encrypt.
//! Homomorphic addition aligns exponents by rescaling the coarser operand;
//! multiplication by a plaintext adds the exponents.

mod fixed;
mod paillier;
mod prime;

use thiserror::Error;

pub use fixed::{FixedPoint, DEFAULT_FRAC_BITS};
pub use paillier::{keygen, Ciphertext, KeyFile, Keypair, PrivateKey, PublicKey, ALLOWED_KEY_BITS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PheError {
    #[error("unsupported key size {0} (expected one of 512, 1024, 2048)")]
    KeySize(u32),
    #[error("value {0} is not finite")]
    NonFinite(String),
    #[error("plaintext overflow: {0}")]
    Overflow(String),
    #[error("ciphertext was produced under a different public key")]
    KeyMismatch,
    #[error("corrupted ciphertext: {0}")]
    Corrupted(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty operand")]
    Empty,
    #[error("key file: {0}")]
    KeyFormat(String),
}
