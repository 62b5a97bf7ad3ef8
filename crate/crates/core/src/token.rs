//! The circulating token and its byte layout.
//!
//! Plaintext, big-endian:
//! `token_id(8) || round(4) || counter(4) || toggle_bits(ceil(N/8)) ||
//! command_field(N * slot_len) || data_field(data_capacity)`,
//! sealed under the ring key as `nonce(12) || ciphertext || tag(16)`.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crypto::{sym_open, sym_seal, CryptoError, SymmetricKey, SEAL_OVERHEAD};

const HEADER_LEN: usize = 8 + 4 + 4;
/// `len(2) || flags(1)` in front of every upload payload.
pub const UPLOAD_HEADER_LEN: usize = 3;
const FLAG_MORE: u8 = 0x01;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("token authentication failed")]
    Authentication,
    #[error("frame is {got} bytes, expected {expected}")]
    Framing { expected: usize, got: usize },
    #[error("device index {index} out of range for {n} devices")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("length mismatch: {left} vs {right} bytes")]
    LengthMismatch { left: usize, right: usize },
    #[error("upload of {len} bytes exceeds sub-field capacity {capacity}")]
    PayloadTooLarge { len: usize, capacity: usize },
    #[error("malformed upload sub-field")]
    MalformedUpload,
}

/// How the data field is shared among devices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataMode {
    /// One sub-field per device.
    SubFields,
    /// A single field granted to the lowest-indexed requester each round.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    /// Ring size `N`: toggle bits and command slots.
    pub devices: usize,
    pub slot_len: usize,
    pub data_mode: DataMode,
    pub subfield_len: usize,
}

impl TokenLayout {
    pub fn toggle_len(&self) -> usize {
        self.devices.div_ceil(8)
    }

    pub fn command_len(&self) -> usize {
        self.devices * self.slot_len
    }

    pub fn data_capacity(&self) -> usize {
        match self.data_mode {
            DataMode::SubFields => self.devices * self.subfield_len,
            DataMode::Single => self.subfield_len,
        }
    }

    pub fn plaintext_len(&self) -> usize {
        HEADER_LEN + self.toggle_len() + self.command_len() + self.data_capacity()
    }

    /// Sealed frame size. Depends only on the layout.
    pub fn frame_len(&self) -> usize {
        self.plaintext_len() + SEAL_OVERHEAD
    }

    pub fn slot_range(&self, index: usize) -> Result<Range<usize>, TokenError> {
        self.check_index(index)?;
        Ok(index * self.slot_len..(index + 1) * self.slot_len)
    }

    /// Data-field range a device writes into.
    pub fn subfield_range(&self, index: usize) -> Result<Range<usize>, TokenError> {
        self.check_index(index)?;
        Ok(match self.data_mode {
            DataMode::SubFields => index * self.subfield_len..(index + 1) * self.subfield_len,
            DataMode::Single => 0..self.subfield_len,
        })
    }

    /// Largest upload payload that fits in one sub-field.
    pub fn upload_capacity(&self) -> usize {
        self.subfield_len.saturating_sub(UPLOAD_HEADER_LEN)
    }

    fn check_index(&self, index: usize) -> Result<(), TokenError> {
        if index >= self.devices {
            Err(TokenError::IndexOutOfRange { index, n: self.devices })
        } else {
            Ok(())
        }
    }
}

/// `N`-bit request string; bit `i` belongs to the device at ring index `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ToggleBits {
    len: usize,
    bytes: Vec<u8>,
}

impl ToggleBits {
    pub fn new(len: usize) -> Self {
        Self { len, bytes: vec![0; len.div_ceil(8)] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) -> Result<(), TokenError> {
        self.check(i)?;
        self.bytes[i / 8] |= 0x80 >> (i % 8);
        Ok(())
    }

    pub fn clear(&mut self, i: usize) -> Result<(), TokenError> {
        self.check(i)?;
        self.bytes[i / 8] &= !(0x80 >> (i % 8));
        Ok(())
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn ones(&self) -> BTreeSet<usize> {
        (0..self.len).filter(|&i| self.get(i)).collect()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn from_bytes(len: usize, bytes: &[u8]) -> Self {
        let mut t = Self { len, bytes: bytes.to_vec() };
        // Padding bits beyond `len` are never meaningful.
        if !len.is_multiple_of(8) {
            if let Some(last) = t.bytes.last_mut() {
                *last &= 0xffu8 << (8 - len % 8);
            }
        }
        t
    }

    fn check(&self, i: usize) -> Result<(), TokenError> {
        if i >= self.len {
            Err(TokenError::IndexOutOfRange { index: i, n: self.len })
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub token_id: u64,
    pub round: u32,
    /// Remaining hops in a counter-extended ring.
    pub counter: i32,
    pub toggle_bits: ToggleBits,
    pub command_field: Vec<u8>,
    pub data_field: Vec<u8>,
}

impl Token {
    /// A token whose command and data fields are entirely random.
    pub fn random<R: RngCore>(layout: &TokenLayout, token_id: u64, round: u32, counter: i32, rng: &mut R) -> Self {
        let mut command_field = vec![0u8; layout.command_len()];
        rng.fill_bytes(&mut command_field);
        let mut data_field = vec![0u8; layout.data_capacity()];
        rng.fill_bytes(&mut data_field);
        Self {
            token_id,
            round,
            counter,
            toggle_bits: ToggleBits::new(layout.devices),
            command_field,
            data_field,
        }
    }

    pub fn slot<'a>(&'a self, layout: &TokenLayout, index: usize) -> Result<&'a [u8], TokenError> {
        Ok(&self.command_field[layout.slot_range(index)?])
    }

    pub fn set_slot(&mut self, layout: &TokenLayout, index: usize, bytes: &[u8]) -> Result<(), TokenError> {
        let range = layout.slot_range(index)?;
        if bytes.len() != range.len() {
            return Err(TokenError::LengthMismatch { left: bytes.len(), right: range.len() });
        }
        self.command_field[range].copy_from_slice(bytes);
        Ok(())
    }

    fn check_layout(&self, layout: &TokenLayout) -> Result<(), TokenError> {
        for (got, expected) in [
            (self.toggle_bits.len(), layout.devices),
            (self.command_field.len(), layout.command_len()),
            (self.data_field.len(), layout.data_capacity()),
        ] {
            if got != expected {
                return Err(TokenError::LengthMismatch { left: got, right: expected });
            }
        }
        Ok(())
    }

    pub fn to_plaintext(&self, layout: &TokenLayout) -> Result<Vec<u8>, TokenError> {
        self.check_layout(layout)?;
        let mut out = Vec::with_capacity(layout.plaintext_len());
        out.extend_from_slice(&self.token_id.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(self.toggle_bits.as_bytes());
        out.extend_from_slice(&self.command_field);
        out.extend_from_slice(&self.data_field);
        Ok(out)
    }

    pub fn from_plaintext(buf: &[u8], layout: &TokenLayout) -> Result<Self, TokenError> {
        if buf.len() != layout.plaintext_len() {
            return Err(TokenError::Framing { expected: layout.plaintext_len(), got: buf.len() });
        }
        let (head, rest) = buf.split_at(HEADER_LEN);
        let (toggle, rest) = rest.split_at(layout.toggle_len());
        let (command, data) = rest.split_at(layout.command_len());
        Ok(Self {
            token_id: u64::from_be_bytes(head[0..8].try_into().unwrap()),
            round: u32::from_be_bytes(head[8..12].try_into().unwrap()),
            counter: i32::from_be_bytes(head[12..16].try_into().unwrap()),
            toggle_bits: ToggleBits::from_bytes(layout.devices, toggle),
            command_field: command.to_vec(),
            data_field: data.to_vec(),
        })
    }
}

/// Nonce for the `hop`-th sealing of a round's token.
pub fn token_nonce(round: u32, hop: u32) -> u64 {
    (u64::from(round) << 32) | u64::from(hop)
}

pub fn token_build(
    token: &Token,
    layout: &TokenLayout,
    ring_key: &SymmetricKey,
    nonce: u64,
) -> Result<Vec<u8>, TokenError> {
    Ok(sym_seal(&token.to_plaintext(layout)?, ring_key, nonce))
}

pub fn token_parse(frame: &[u8], layout: &TokenLayout, ring_key: &SymmetricKey) -> Result<Token, TokenError> {
    if frame.len() != layout.frame_len() {
        return Err(TokenError::Framing { expected: layout.frame_len(), got: frame.len() });
    }
    let plain = sym_open(frame, ring_key).map_err(|e| match e {
        CryptoError::Framing { len, min } => TokenError::Framing { expected: min, got: len },
        _ => TokenError::Authentication,
    })?;
    Token::from_plaintext(&plain, layout)
}

/// `b_o = b_r XOR b_g`.
pub fn data_overwrite(random_bits: &[u8], generated_bits: &[u8]) -> Result<Vec<u8>, TokenError> {
    xor(random_bits, generated_bits)
}

/// `b_g = b_o XOR b_r`.
pub fn data_recover(overwritten: &[u8], random_bits: &[u8]) -> Result<Vec<u8>, TokenError> {
    xor(overwritten, random_bits)
}

fn xor(a: &[u8], b: &[u8]) -> Result<Vec<u8>, TokenError> {
    if a.len() != b.len() {
        return Err(TokenError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x ^ y).collect())
}

pub fn toggle_set(token: &Token, device_index: usize) -> Result<Token, TokenError> {
    let mut t = token.clone();
    t.toggle_bits.set(device_index)?;
    Ok(t)
}

pub fn toggle_read(token: &Token) -> BTreeSet<usize> {
    token.toggle_bits.ones()
}

/// Frames an upload into exactly `subfield_len` bytes:
/// `len(2) || flags(1) || payload || zero padding`.
pub fn encode_upload(payload: &[u8], more: bool, subfield_len: usize) -> Result<Vec<u8>, TokenError> {
    let capacity = subfield_len.saturating_sub(UPLOAD_HEADER_LEN);
    if payload.len() > capacity || payload.len() > u16::MAX as usize {
        return Err(TokenError::PayloadTooLarge { len: payload.len(), capacity });
    }
    let mut out = Vec::with_capacity(subfield_len);
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.push(if more { FLAG_MORE } else { 0 });
    out.extend_from_slice(payload);
    out.resize(subfield_len, 0);
    Ok(out)
}

/// Inverse of [`encode_upload`]: `(payload, more)`.
pub fn decode_upload(field: &[u8]) -> Result<(Vec<u8>, bool), TokenError> {
    if field.len() < UPLOAD_HEADER_LEN {
        return Err(TokenError::MalformedUpload);
    }
    let len = u16::from_be_bytes([field[0], field[1]]) as usize;
    let flags = field[2];
    let body = &field[UPLOAD_HEADER_LEN..];
    if len > body.len() || flags & !FLAG_MORE != 0 || body[len..].iter().any(|&b| b != 0) {
        return Err(TokenError::MalformedUpload);
    }
    Ok((body[..len].to_vec(), flags & FLAG_MORE != 0))
}
