//! Key-derived pseudorandom bits for hash encryption.
//!
//! The seed is the 64-bit FNV-1a hash of the key bytes; output words come from
//! xorshift64* and are consumed most-significant bit first. Not a
//! cryptographic generator.

use crate::bits::BitVector;
use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const ZERO_SEED_REPLACEMENT: u64 = 0x9E37_79B9_7F4A_7C15;
const XORSHIFT_MULTIPLIER: u64 = 0x2545_F491_4F6C_DD1D;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Infinite bit stream seeded from a key.
#[derive(Debug, Clone)]
pub struct KeyStream {
    state: u64,
    word: u64,
    remaining: u32,
}

impl KeyStream {
    pub fn from_bytes(key: &[u8]) -> Self {
        let seed = match fnv1a64(key) {
            0 => ZERO_SEED_REPLACEMENT,
            s => s,
        };
        KeyStream {
            state: seed,
            word: 0,
            remaining: 0,
        }
    }

    pub fn new(key: &str) -> Self {
        KeyStream::from_bytes(key.as_bytes())
    }

    /// Stream for one tamper-hash block: the key bytes followed by the block
    /// index as 8 big-endian bytes.
    pub fn for_block(key: &str, block: usize) -> Self {
        let mut material = key.as_bytes().to_vec();
        material.extend_from_slice(&(block as u64).to_be_bytes());
        KeyStream::from_bytes(&material)
    }

    pub fn seed(&self) -> u64 {
        self.state
    }

    pub fn next_word(&mut self) -> u64 {
        let mut s = self.state;
        s ^= s >> 12;
        s ^= s << 25;
        s ^= s >> 27;
        self.state = s;
        s.wrapping_mul(XORSHIFT_MULTIPLIER)
    }
}

impl Iterator for KeyStream {
    type Item = bool;

    fn next(&mut self) -> Option<bool> {
        if self.remaining == 0 {
            self.word = self.next_word();
            self.remaining = 64;
        }
        self.remaining -= 1;
        Some((self.word >> self.remaining) & 1 == 1)
    }
}

pub fn keystream_bits(key: &str, n: usize) -> Result<BitVector> {
    if key.is_empty() {
        return Err(Error::InvalidArgument("key must not be empty".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("keystream length must be positive".into()));
    }
    Ok(KeyStream::new(key).take(n).collect())
}

/// XOR with the key's stream. Applying it twice restores the input.
pub fn encrypt(bits: &BitVector, key: &str) -> BitVector {
    bits.xor_stream(KeyStream::new(key))
}

pub fn decrypt(bits: &BitVector, key: &str) -> BitVector {
    encrypt(bits, key)
}
