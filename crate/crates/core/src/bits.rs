use std::fmt;

use crate::error::{Error, Result};

/// An ordered sequence of bits.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    bits: Vec<bool>,
}

impl BitVector {
    pub fn new() -> Self {
        BitVector::default()
    }

    pub fn zeros(len: usize) -> Self {
        BitVector {
            bits: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn push(&mut self, bit: bool) {
        self.bits.push(bit);
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        self.bits.iter().copied()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push_uint(&mut self, value: u64, width: usize) {
        for shift in (0..width).rev() {
            self.bits.push((value >> shift) & 1 == 1);
        }
    }

    pub fn extend(&mut self, other: &BitVector) {
        self.bits.extend_from_slice(&other.bits);
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> BitVector {
        BitVector {
            bits: self.bits[range].to_vec(),
        }
    }

    /// Reads `width` bits starting at `offset` as a big-endian integer.
    pub fn read_uint(&self, offset: usize, width: usize) -> u64 {
        self.bits[offset..offset + width]
            .iter()
            .fold(0u64, |acc, &b| (acc << 1) | u64::from(b))
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of positions where the two vectors differ.
    pub fn xor_count(&self, other: &BitVector) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }

    /// XOR with a bit stream; the stream must yield at least `len` bits.
    pub fn xor_stream(&self, stream: impl IntoIterator<Item = bool>) -> BitVector {
        let mut stream = stream.into_iter();
        let bits = self
            .bits
            .iter()
            .map(|&b| b ^ stream.next().expect("keystream shorter than input"))
            .collect();
        BitVector { bits }
    }

    /// Lowercase hex, most significant nibble first; a trailing partial
    /// nibble is padded with zero bits.
    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|chunk| {
                let nibble = chunk
                    .iter()
                    .chain(std::iter::repeat(&false))
                    .take(4)
                    .fold(0u32, |acc, &b| (acc << 1) | u32::from(b));
                char::from_digit(nibble, 16).expect("nibble < 16")
            })
            .collect()
    }

    /// Parses `len` bits from hex produced by [`to_hex`](Self::to_hex).
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if hex.len() != len.div_ceil(4) {
            return Err(Error::HashFormat(format!(
                "expected {} hex digits for {len} bits, got {}",
                len.div_ceil(4),
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for c in hex.chars() {
            let nibble = c
                .to_digit(16)
                .filter(|_| !c.is_ascii_uppercase())
                .ok_or_else(|| Error::HashFormat(format!("invalid hex digit `{c}`")))?;
            for shift in (0..4).rev() {
                bits.push((nibble >> shift) & 1 == 1);
            }
        }
        if bits[len..].iter().any(|&b| b) {
            return Err(Error::HashFormat("non-zero padding bits".into()));
        }
        bits.truncate(len);
        Ok(BitVector { bits })
    }
}

impl FromIterator<bool> for BitVector {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        BitVector {
            bits: iter.into_iter().collect(),
        }
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector[{}](", self.len())?;
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        f.write_str(")")
    }
}

impl fmt::Display for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}
