use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prime::{is_probable_prime, random_prime, MILLER_RABIN_ROUNDS};
use super::CryptoError;

/// Smallest modulus width accepted by [`gen_params`].
pub const MIN_MODULUS_BITS: u64 = 16;
/// Default simulation-scale modulus.
pub const DEFAULT_MODULUS_BITS: u64 = 512;
/// Authentication tag appended to `e_z`.
pub const COMMAND_TAG_LEN: usize = 16;

/// Owner-side RSA parameters. Only the owner ever holds `p`, `q` and `phi`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleParams {
    pub p: BigUint,
    pub q: BigUint,
    pub n: BigUint,
    pub phi: BigUint,
    pub bit_length: u64,
}

impl PuzzleParams {
    /// Builds parameters from two known primes.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, CryptoError> {
        if p == q {
            return Err(CryptoError::EqualPrimes);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for f in [&p, &q] {
            if !is_probable_prime(f, MILLER_RABIN_ROUNDS, &mut rng) {
                return Err(CryptoError::NotPrime(f.to_string()));
            }
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        let bit_length = n.bits();
        Ok(Self { p, q, n, phi, bit_length })
    }

    /// Draws a base with `1 < a < n` and `gcd(a, n) = 1`.
    pub fn random_base<R: RngCore>(&self, rng: &mut R) -> BigUint {
        random_base(&self.n, rng)
    }

    /// Draws a fresh puzzle key uniformly from `[0, n)`.
    pub fn random_key<R: RngCore>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_below(&self.n)
    }
}

pub(crate) fn random_base<R: RngCore>(n: &BigUint, rng: &mut R) -> BigUint {
    let two = BigUint::from(2u32);
    loop {
        let a = rng.gen_biguint_range(&two, n);
        if a.gcd(n).is_one() {
            return a;
        }
    }
}

/// Generates an RSA modulus of exactly `bit_length` bits, deterministically
/// from `seed`.
pub fn gen_params(bit_length: u64, seed: u64) -> Result<PuzzleParams, CryptoError> {
    if bit_length < MIN_MODULUS_BITS {
        return Err(CryptoError::ModulusTooSmall(bit_length));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p_bits = bit_length.div_ceil(2);
    let q_bits = bit_length - p_bits;
    let p = random_prime(p_bits, &mut rng);
    let q = loop {
        let q = random_prime(q_bits, &mut rng);
        if q != p {
            break q;
        }
    };
    let n = &p * &q;
    debug_assert_eq!(n.bits(), bit_length);
    let phi = (&p - 1u32) * (&q - 1u32);
    Ok(PuzzleParams { p, q, n, phi, bit_length })
}

/// The public time-lock puzzle `(n, a, t_hat, e_z, e_k)` plus its validity
/// deadline. Carries no trapdoor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Puzzle {
    pub n: BigUint,
    pub a: BigUint,
    pub t_hat: u64,
    pub e_z: Vec<u8>,
    pub e_k: BigUint,
    /// Validity deadline in microseconds.
    pub t_val: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PuzzleSolution {
    pub key: BigUint,
    pub command: Vec<u8>,
    pub squarings_performed: u64,
    /// `a^(2^t_hat) mod n`, reported back to the owner as proof of work.
    pub value: BigUint,
}

/// Work spent computing `a^(2^t_hat) mod n` by some route.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Work {
    pub squarings: u64,
    pub exponentiations: u32,
}

fn command_cipher(key: &BigUint) -> ChaCha20Poly1305 {
    let mut h = Sha256::new();
    h.update(b"ringveil/puzzle-key");
    h.update(key.to_bytes_be());
    let digest = h.finalize();
    ChaCha20Poly1305::new(Key::from_slice(&digest))
}

// Each puzzle key is fresh, so a fixed nonce never repeats under one key.
const COMMAND_NONCE: [u8; 12] = [0u8; 12];

fn seal_command(key: &BigUint, command: &[u8]) -> Vec<u8> {
    command_cipher(key)
        .encrypt(Nonce::from_slice(&COMMAND_NONCE), command)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
}

fn open_command(key: &BigUint, e_z: &[u8]) -> Result<Vec<u8>, CryptoError> {
    command_cipher(key)
        .decrypt(Nonce::from_slice(&COMMAND_NONCE), e_z)
        .map_err(|_| CryptoError::Authentication)
}

/// Locks `command` behind `t_hat` sequential squarings. The creator takes
/// the totient shortcut, so cost is independent of `t_hat`.
pub fn puzzle_create(
    params: &PuzzleParams,
    a: &BigUint,
    t_hat: u64,
    command: &[u8],
    key: &BigUint,
    t_val: u64,
) -> Result<Puzzle, CryptoError> {
    let n = &params.n;
    if *a <= BigUint::one() || a >= n || !a.gcd(n).is_one() {
        return Err(CryptoError::InvalidBase);
    }
    if key >= n {
        return Err(CryptoError::KeyOutOfRange);
    }
    let (mask, _) = trapdoor_eval(n, a, t_hat, &params.phi);
    let e_k = (key + mask) % n;
    Ok(Puzzle {
        n: n.clone(),
        a: a.clone(),
        t_hat,
        e_z: seal_command(key, command),
        e_k,
        t_val,
    })
}

fn trapdoor_eval(n: &BigUint, a: &BigUint, t_hat: u64, phi: &BigUint) -> (BigUint, Work) {
    let exponent = BigUint::from(2u32).modpow(&BigUint::from(t_hat), phi);
    let value = a.modpow(&exponent, n);
    (value, Work { squarings: 0, exponentiations: 2 })
}

/// `a^(2^t_hat mod phi) mod n`. Two modular exponentiations.
pub fn puzzle_fast_eval(puzzle: &Puzzle, phi: &BigUint) -> BigUint {
    puzzle_fast_eval_with_work(puzzle, phi).0
}

pub fn puzzle_fast_eval_with_work(puzzle: &Puzzle, phi: &BigUint) -> (BigUint, Work) {
    trapdoor_eval(&puzzle.n, &puzzle.a, puzzle.t_hat, phi)
}

/// Resumable repeated squaring of `a` modulo `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequentialSolver {
    n: BigUint,
    target: u64,
    done: u64,
    value: BigUint,
}

impl SequentialSolver {
    pub fn new(puzzle: &Puzzle) -> Self {
        Self {
            n: puzzle.n.clone(),
            target: puzzle.t_hat,
            done: 0,
            value: &puzzle.a % &puzzle.n,
        }
    }

    /// Performs up to `budget` squarings; returns how many were done.
    pub fn advance(&mut self, budget: u64) -> u64 {
        let steps = budget.min(self.remaining());
        for _ in 0..steps {
            self.value = (&self.value * &self.value) % &self.n;
        }
        self.done += steps;
        steps
    }

    pub fn squarings_done(&self) -> u64 {
        self.done
    }

    pub fn remaining(&self) -> u64 {
        self.target - self.done
    }

    pub fn is_complete(&self) -> bool {
        self.done == self.target
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    /// Unlocks the key and command once all squarings are done.
    pub fn finish(&self, puzzle: &Puzzle) -> Result<PuzzleSolution, CryptoError> {
        if !self.is_complete() {
            return Err(CryptoError::Incomplete { done: self.done, required: self.target });
        }
        let n = &puzzle.n;
        let key = ((&puzzle.e_k % n) + n - (&self.value % n)) % n;
        let command = open_command(&key, &puzzle.e_z)?;
        Ok(PuzzleSolution {
            key,
            command,
            squarings_performed: self.done,
            value: self.value.clone(),
        })
    }
}

/// Solves a puzzle the slow way: exactly `t_hat` sequential squarings.
pub fn puzzle_solve(puzzle: &Puzzle) -> Result<PuzzleSolution, CryptoError> {
    let mut solver = SequentialSolver::new(puzzle);
    solver.advance(puzzle.t_hat);
    solver.finish(puzzle)
}

fn put_biguint(out: &mut Vec<u8>, v: &BigUint) {
    let bytes = if v.is_zero() { Vec::new() } else { v.to_bytes_be() };
    put_bytes(out, &bytes);
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], CryptoError> {
        if self.buf.len() < len {
            return Err(CryptoError::Malformed("truncated puzzle encoding"));
        }
        let (head, tail) = self.buf.split_at(len);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CryptoError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CryptoError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CryptoError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn biguint(&mut self) -> Result<BigUint, CryptoError> {
        let b = self.bytes()?;
        if b.first() == Some(&0) {
            return Err(CryptoError::Malformed("leading zero byte in integer"));
        }
        Ok(BigUint::from_bytes_be(b))
    }
}

impl Puzzle {
    /// Wire encoding: `n, a, t_hat(8), t_val(8), e_k, e_z`, integers and
    /// byte strings each prefixed with a 4-byte big-endian length.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 3 * self.n.bits() as usize / 8 + self.e_z.len());
        put_biguint(&mut out, &self.n);
        put_biguint(&mut out, &self.a);
        out.extend_from_slice(&self.t_hat.to_be_bytes());
        out.extend_from_slice(&self.t_val.to_be_bytes());
        put_biguint(&mut out, &self.e_k);
        put_bytes(&mut out, &self.e_z);
        out
    }

    /// Decodes one puzzle from the front of `buf`, returning the unread tail.
    pub fn decode_prefix(buf: &[u8]) -> Result<(Self, &[u8]), CryptoError> {
        let mut r = Reader { buf };
        let n = r.biguint()?;
        let a = r.biguint()?;
        let t_hat = r.u64()?;
        let t_val = r.u64()?;
        let e_k = r.biguint()?;
        let e_z = r.bytes()?.to_vec();
        Ok((Self { n, a, t_hat, e_z, e_k, t_val }, r.buf))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CryptoError> {
        let (p, rest) = Self::decode_prefix(buf)?;
        if !rest.is_empty() {
            return Err(CryptoError::Malformed("trailing bytes after puzzle"));
        }
        Ok(p)
    }

    /// Upper bound on the encoded size for a modulus of `modulus_bits` and a
    /// plaintext command of `command_len` bytes.
    pub fn max_encoded_len(modulus_bits: u64, command_len: usize) -> usize {
        let int = modulus_bits.div_ceil(8) as usize;
        3 * (4 + int) + 8 + 8 + 4 + command_len + COMMAND_TAG_LEN
    }
}
