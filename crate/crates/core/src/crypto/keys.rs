use std::collections::BTreeMap;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use super::CryptoError;
use crate::DeviceId;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
/// Bytes added by [`sym_seal`]: nonce prefix plus tag.
pub const SEAL_OVERHEAD: usize = NONCE_LEN + TAG_LEN;
/// Bytes added by [`seal_for_device`]: ephemeral public key plus tag.
pub const DEVICE_SEAL_OVERHEAD: usize = 32 + TAG_LEN;

pub type Digest32 = [u8; DIGEST_LEN];

/// 256-bit shared key for token frames.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; 32]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.0))
    }
}

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// Encodes a counter nonce: big-endian, left-padded to 96 bits.
pub fn counter_nonce(counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[NONCE_LEN - 8..].copy_from_slice(&counter.to_be_bytes());
    n
}

/// Authenticated encryption. Output is `nonce(12) || ciphertext || tag(16)`.
pub fn sym_seal(plaintext: &[u8], key: &SymmetricKey, nonce: u64) -> Vec<u8> {
    let nonce = counter_nonce(nonce);
    let ct = key
        .cipher()
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut frame = Vec::with_capacity(NONCE_LEN + ct.len());
    frame.extend_from_slice(&nonce);
    frame.extend_from_slice(&ct);
    frame
}

pub fn sym_open(frame: &[u8], key: &SymmetricKey) -> Result<Vec<u8>, CryptoError> {
    if frame.len() < SEAL_OVERHEAD {
        return Err(CryptoError::Framing { len: frame.len(), min: SEAL_OVERHEAD });
    }
    let (nonce, ct) = frame.split_at(NONCE_LEN);
    key.cipher()
        .decrypt(Nonce::from_slice(nonce), ct)
        .map_err(|_| CryptoError::Authentication)
}

pub fn hash_digest(payload: &[u8]) -> Digest32 {
    Sha256::digest(payload).into()
}

pub fn sign_order(payload: &[u8], secret: &SigningKey) -> Vec<u8> {
    secret.sign(payload).to_bytes().to_vec()
}

/// Returns `false` for malformed signatures rather than erroring.
pub fn verify_order_sig(payload: &[u8], signature: &[u8], public: &VerifyingKey) -> bool {
    let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
        return false;
    };
    public.verify(payload, &sig).is_ok()
}

fn device_cipher(shared: &[u8; 32], ephemeral: &PublicKey, recipient: &PublicKey) -> ChaCha20Poly1305 {
    let mut h = Sha256::new();
    h.update(b"ringveil/device-wrap");
    h.update(shared);
    h.update(ephemeral.as_bytes());
    h.update(recipient.as_bytes());
    ChaCha20Poly1305::new(Key::from_slice(&h.finalize()))
}

/// Hybrid public-key encryption to a device: an ephemeral X25519 exchange
/// yields a one-time symmetric key that seals `plaintext`.
/// Output is `ephemeral_pk(32) || ciphertext || tag(16)`.
pub fn seal_for_device<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    recipient: &PublicKey,
    rng: &mut R,
) -> Vec<u8> {
    let ephemeral = StaticSecret::random_from_rng(&mut *rng);
    let ephemeral_pk = PublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(recipient);
    let ct = device_cipher(shared.as_bytes(), &ephemeral_pk, recipient)
        .encrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(32 + ct.len());
    out.extend_from_slice(ephemeral_pk.as_bytes());
    out.extend_from_slice(&ct);
    out
}

pub fn open_for_device(sealed: &[u8], secret: &StaticSecret) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < DEVICE_SEAL_OVERHEAD {
        return Err(CryptoError::Framing { len: sealed.len(), min: DEVICE_SEAL_OVERHEAD });
    }
    let (epk, ct) = sealed.split_at(32);
    let ephemeral_pk = PublicKey::from(<[u8; 32]>::try_from(epk).unwrap());
    let recipient = PublicKey::from(secret);
    let shared = secret.diffie_hellman(&ephemeral_pk);
    device_cipher(shared.as_bytes(), &ephemeral_pk, &recipient)
        .decrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), ct)
        .map_err(|_| CryptoError::Authentication)
}

/// A device's signing pair and its key-exchange pair.
#[derive(Clone)]
pub struct DeviceKeys {
    pub signing: SigningKey,
    pub exchange: StaticSecret,
}

impl DeviceKeys {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            signing: SigningKey::generate(rng),
            exchange: StaticSecret::random_from_rng(rng),
        }
    }

    pub fn exchange_public(&self) -> PublicKey {
        PublicKey::from(&self.exchange)
    }
}

impl std::fmt::Debug for DeviceKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceKeys")
            .field("verifying", &self.signing.verifying_key())
            .field("exchange", &self.exchange_public())
            .finish()
    }
}

/// Pre-provisioned keys for one home: owner, hub, every device, and the
/// ring key shared by hub and devices.
#[derive(Clone, Debug)]
pub struct KeyRegistry {
    pub owner_id: u64,
    pub hub_id: u64,
    pub owner: SigningKey,
    pub hub: SigningKey,
    pub devices: BTreeMap<DeviceId, DeviceKeys>,
    pub ring_key: SymmetricKey,
}

impl KeyRegistry {
    /// Deterministically provisions keys for `devices` from `seed`.
    pub fn generate(devices: impl IntoIterator<Item = DeviceId>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6b65_7973_u64);
        let owner = SigningKey::generate(&mut rng);
        let hub = SigningKey::generate(&mut rng);
        let ring_key = SymmetricKey::random(&mut rng);
        let mut ids: Vec<DeviceId> = devices.into_iter().collect();
        ids.sort();
        ids.dedup();
        let devices = ids.into_iter().map(|id| (id, DeviceKeys::random(&mut rng))).collect();
        Self { owner_id: 1, hub_id: 2, owner, hub, devices, ring_key }
    }

    pub fn owner_public(&self) -> VerifyingKey {
        self.owner.verifying_key()
    }

    pub fn device(&self, id: DeviceId) -> Result<&DeviceKeys, CryptoError> {
        self.devices.get(&id).ok_or(CryptoError::UnknownDevice(id))
    }

    pub fn device_ids(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(42)
    }

    #[test]
    fn seal_roundtrip_and_tamper() {
        let mut rng = rng();
        let key = SymmetricKey::random(&mut rng);
        let mut msg = vec![0u8; 1024];
        rng.fill_bytes(&mut msg);
        let frame = sym_seal(&msg, &key, 7);
        assert_eq!(frame.len(), msg.len() + SEAL_OVERHEAD);
        assert_eq!(sym_open(&frame, &key).unwrap(), msg);

        let mut bad = frame.clone();
        bad[NONCE_LEN + 3] ^= 0x10;
        assert!(matches!(sym_open(&bad, &key), Err(CryptoError::Authentication)));

        assert!(matches!(sym_open(&frame[..10], &key), Err(CryptoError::Framing { .. })));
    }

    #[test]
    fn nonces_change_frames() {
        let key = SymmetricKey::random(&mut rng());
        assert_ne!(sym_seal(b"same", &key, 1), sym_seal(b"same", &key, 2));
        assert_eq!(&sym_seal(b"same", &key, 0x0102)[..NONCE_LEN], &counter_nonce(0x0102));
    }

    #[test]
    fn wrong_key_is_authentication_error() {
        let mut rng = rng();
        let k1 = SymmetricKey::random(&mut rng);
        let k2 = SymmetricKey::random(&mut rng);
        let frame = sym_seal(b"payload", &k1, 0);
        assert!(matches!(sym_open(&frame, &k2), Err(CryptoError::Authentication)));
    }

    #[test]
    fn digest_properties() {
        assert_eq!(hash_digest(b"abc"), hash_digest(b"abc"));
        assert_eq!(
            hex::encode(hash_digest(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let mut rng = rng();
        for _ in 0..64 {
            let mut m = vec![0u8; 40];
            rng.fill_bytes(&mut m);
            let mut flipped = m.clone();
            let bit = (rng.next_u32() % 320) as usize;
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(hash_digest(&m), hash_digest(&flipped));
        }
    }

    #[test]
    fn signatures() {
        let reg = KeyRegistry::generate([DeviceId(1)], 1);
        let other = KeyRegistry::generate([DeviceId(1)], 2);
        let sig = sign_order(b"order", &reg.owner);
        assert!(verify_order_sig(b"order", &sig, &reg.owner_public()));
        assert!(!verify_order_sig(b"order", &sig, &other.owner_public()));
        assert!(!verify_order_sig(b"orden", &sig, &reg.owner_public()));
        assert!(!verify_order_sig(b"order", &sig[..63], &reg.owner_public()));
        assert!(!verify_order_sig(b"order", &[], &reg.owner_public()));
    }

    #[test]
    fn device_wrap_roundtrip() {
        let reg = KeyRegistry::generate([DeviceId(1), DeviceId(2)], 3);
        let d1 = reg.device(DeviceId(1)).unwrap();
        let d2 = reg.device(DeviceId(2)).unwrap();
        let mut rng = rng();
        let sealed = seal_for_device(b"puzzle", &d1.exchange_public(), &mut rng);
        assert_eq!(sealed.len(), 6 + DEVICE_SEAL_OVERHEAD);
        assert_eq!(open_for_device(&sealed, &d1.exchange).unwrap(), b"puzzle");
        assert!(matches!(open_for_device(&sealed, &d2.exchange), Err(CryptoError::Authentication)));
        assert!(matches!(open_for_device(&sealed[..20], &d1.exchange), Err(CryptoError::Framing { .. })));
    }

    #[test]
    fn registry_is_deterministic() {
        let a = KeyRegistry::generate([DeviceId(3), DeviceId(1)], 9);
        let b = KeyRegistry::generate([DeviceId(1), DeviceId(3)], 9);
        assert_eq!(a.owner_public(), b.owner_public());
        assert_eq!(a.ring_key, b.ring_key);
        assert_eq!(a.device_ids().collect::<Vec<_>>(), vec![DeviceId(1), DeviceId(3)]);
        assert!(matches!(a.device(DeviceId(2)), Err(CryptoError::UnknownDevice(DeviceId(2)))));
    }
}
