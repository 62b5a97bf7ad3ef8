//! Time-lock puzzles, token sealing, order signatures.

mod keys;
mod prime;
mod puzzle;

pub use keys::{
    counter_nonce, hash_digest, open_for_device, seal_for_device, sign_order, sym_open, sym_seal,
    verify_order_sig, DeviceKeys, Digest32, KeyRegistry, SymmetricKey, DEVICE_SEAL_OVERHEAD,
    DIGEST_LEN, NONCE_LEN, SEAL_OVERHEAD, SIGNATURE_LEN, TAG_LEN,
};
pub use prime::{is_probable_prime, random_prime, MILLER_RABIN_ROUNDS};
pub use puzzle::{
    gen_params, puzzle_create, puzzle_fast_eval, puzzle_fast_eval_with_work, puzzle_solve, Puzzle,
    PuzzleParams, PuzzleSolution, SequentialSolver, Work, COMMAND_TAG_LEN, DEFAULT_MODULUS_BITS,
    MIN_MODULUS_BITS,
};
pub(crate) use puzzle::random_base;

pub use ed25519_dalek::{SigningKey, VerifyingKey};
pub use x25519_dalek::{PublicKey as ExchangePublicKey, StaticSecret as ExchangeSecret};

use crate::DeviceId;

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    #[error("modulus of {0} bits is too small (minimum 16)")]
    ModulusTooSmall(u64),
    #[error("p and q must differ")]
    EqualPrimes,
    #[error("{0} is not prime")]
    NotPrime(String),
    #[error("base must satisfy 1 < a < n and gcd(a, n) = 1")]
    InvalidBase,
    #[error("puzzle key must be smaller than n")]
    KeyOutOfRange,
    #[error("authentication tag mismatch")]
    Authentication,
    #[error("frame of {len} bytes is shorter than the {min}-byte minimum")]
    Framing { len: usize, min: usize },
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error("solver stopped after {done} of {required} squarings")]
    Incomplete { done: u64, required: u64 },
    #[error("no keys provisioned for device {0}")]
    UnknownDevice(DeviceId),
}
