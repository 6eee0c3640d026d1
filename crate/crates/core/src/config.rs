use sha2::{Digest, Sha256};

use crate::chaos::ChaosParams;
use crate::error::{Error, Result};
use crate::hos_features::SelectionConfig;
use crate::similarity::DistanceWeights;

/// Every tunable of both hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct HashConfig {
    /// Weight selection (retain) ratio `c`.
    pub retain: f64,
    /// Segment count `N`.
    pub segments: usize,
    /// Bits per quantized statistic `b`.
    pub bits: usize,
    /// Structure capacity `K`.
    pub capacity: usize,
    pub tau: f64,
    pub k1: f64,
    pub k2: f64,
    /// Tamper-hash block count `B`.
    pub blocks: usize,
    pub mu: f64,
    pub k_map: f64,
    pub iterations: usize,
    pub key: String,
}

impl Default for HashConfig {
    fn default() -> Self {
        HashConfig {
            retain: 1.0 / 16.0,
            segments: 50,
            bits: 4,
            capacity: 20,
            tau: 0.32,
            k1: 0.8,
            k2: 0.2,
            blocks: 450,
            mu: 0.2,
            k_map: 2.0,
            iterations: 100,
            key: String::new(),
        }
    }
}

/// Block count for the small models (MNIST-scale).
pub const SMALL_PROFILE_BLOCKS: usize = 100;

impl HashConfig {
    pub fn with_key(key: impl Into<String>) -> Self {
        HashConfig {
            key: key.into(),
            ..HashConfig::default()
        }
    }

    /// Defaults with `B = 100`.
    pub fn small_profile(key: impl Into<String>) -> Self {
        HashConfig {
            blocks: SMALL_PROFILE_BLOCKS,
            ..HashConfig::with_key(key)
        }
    }

    /// Piracy hash length `T = (2N + 1 + K) b`.
    pub fn hash_len(&self) -> usize {
        (2 * self.segments + 1 + self.capacity) * self.bits
    }

    pub fn hos_len(&self) -> usize {
        2 * self.segments * self.bits
    }

    pub fn struct_len(&self) -> usize {
        (1 + self.capacity) * self.bits
    }

    pub fn selection(&self) -> Result<SelectionConfig> {
        SelectionConfig::new(self.retain)
    }

    pub fn chaos(&self) -> Result<ChaosParams> {
        ChaosParams::new(self.mu, self.k_map, self.iterations)
    }

    pub fn weights(&self) -> Result<DistanceWeights> {
        DistanceWeights::new(self.k1, self.k2, self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        self.selection()?;
        self.chaos()?;
        self.weights()?;
        if self.segments == 0 {
            return Err(Error::InvalidArgument("segments must be positive".into()));
        }
        if !(1..=16).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!(
                "bits per statistic must be in 1..=16, got {}",
                self.bits
            )));
        }
        if self.capacity == 0 {
            return Err(Error::InvalidArgument("capacity must be positive".into()));
        }
        if self.blocks == 0 {
            return Err(Error::InvalidArgument("blocks must be positive".into()));
        }
        if self.key.is_empty() {
            return Err(Error::InvalidArgument("key must not be empty".into()));
        }
        Ok(())
    }

    /// Identifies everything a piracy hash depends on, key included, without
    /// revealing the key.
    pub fn piracy_digest(&self) -> String {
        digest(&format!(
            "piracy/1;c={:016x};N={};b={};K={};key={}",
            self.retain.to_bits(),
            self.segments,
            self.bits,
            self.capacity,
            key_fingerprint(&self.key)
        ))
    }

    pub fn tamper_digest(&self) -> String {
        digest(&format!(
            "tamper/1;B={};mu={:016x};k={:016x};it={};key={}",
            self.blocks,
            self.mu.to_bits(),
            self.k_map.to_bits(),
            self.iterations,
            key_fingerprint(&self.key)
        ))
    }
}

pub fn key_fingerprint(key: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"hoshash-key/1:");
    h.update(key.as_bytes());
    to_hex(&h.finalize()[..16])
}

fn digest(text: &str) -> String {
    to_hex(&Sha256::digest(text.as_bytes())[..16])
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
