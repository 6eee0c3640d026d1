//! Turning feature sequences into the keyed piracy hash.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::config::HashConfig;
use crate::error::{Error, Result};
use crate::hos_features::{hos_of_selected, select_weights, structure_sequence};
use crate::keystream::KeyStream;
use crate::tensor_store::{ModelWeights, TensorFilter};

pub const HASH_FORMAT_VERSION: u32 = 1;

/// Quantizes a real sequence to `bits`-wide codes.
///
/// Values are shifted so the minimum is zero, compressed with `ln(1 + y)`,
/// divided by their maximum and rounded half-up onto `2^bits - 1` levels.
/// Each level is emitted big-endian.
pub fn encode_sequence(values: &[f64], bits: usize) -> Result<BitVector> {
    Ok(levels_to_bits(&quantize_levels(values, bits)?, bits))
}

pub fn quantize_levels(values: &[f64], bits: usize) -> Result<Vec<u64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
    }
    if !(1..=32).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bits per value must be in 1..=32, got {bits}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in feature sequence".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let logs: Vec<f64> = values.iter().map(|v| (v - min).ln_1p()).collect();
    let max = logs.iter().copied().fold(0.0, f64::max);
    let top = ((1u64 << bits) - 1) as f64;
    Ok(logs
        .iter()
        .map(|&z| {
            let u = if max > 0.0 { z / max } else { 0.0 };
            (u * top + 0.5).floor() as u64
        })
        .collect())
}

fn levels_to_bits(levels: &[u64], bits: usize) -> BitVector {
    let mut out = BitVector::new();
    for &level in levels {
        out.push_uint(level, bits);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PiracyHash {
    pub model_id: Option<String>,
    pub segments: usize,
    pub bits: usize,
    pub capacity: usize,
    pub hos_bits: BitVector,
    pub struct_bits: BitVector,
    pub config_digest: String,
}

/// Wall time of the two pipeline stages.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimings {
    pub selection: Duration,
    pub features: Duration,
}

impl PiracyHash {
    pub fn len(&self) -> usize {
        self.hos_bits.len() + self.struct_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_record(&self) -> PiracyHashRecord {
        PiracyHashRecord {
            version: HASH_FORMAT_VERSION,
            model_id: self.model_id.clone(),
            t: self.len(),
            n: self.segments,
            b: self.bits,
            k: self.capacity,
            hos_bits: self.hos_bits.to_hex(),
            struct_bits: self.struct_bits.to_hex(),
            config_digest: self.config_digest.clone(),
        }
    }

    pub fn from_record(rec: &PiracyHashRecord) -> Result<Self> {
        if rec.version != HASH_FORMAT_VERSION {
            return Err(Error::HashFormat(format!(
                "unsupported version {}",
                rec.version
            )));
        }
        let hos_len = 2 * rec.n * rec.b;
        let struct_len = (1 + rec.k) * rec.b;
        if rec.t != hos_len + struct_len {
            return Err(Error::HashFormat(format!(
                "T = {} disagrees with (2N + 1 + K) b = {}",
                rec.t,
                hos_len + struct_len
            )));
        }
        Ok(PiracyHash {
            model_id: rec.model_id.clone(),
            segments: rec.n,
            bits: rec.b,
            capacity: rec.k,
            hos_bits: BitVector::from_hex(&rec.hos_bits, hos_len)?,
            struct_bits: BitVector::from_hex(&rec.struct_bits, struct_len)?,
            config_digest: rec.config_digest.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: PiracyHashRecord =
            serde_json::from_str(text.trim()).map_err(|e| Error::HashFormat(e.to_string()))?;
        PiracyHash::from_record(&rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PiracyHash::from_json(&text)
    }
}

/// On-disk form of a [`PiracyHash`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiracyHashRecord {
    pub version: u32,
    pub model_id: Option<String>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub b: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub hos_bits: String,
    pub struct_bits: String,
    pub config_digest: String,
}

pub fn piracy_hash(model: &ModelWeights, cfg: &HashConfig) -> Result<PiracyHash> {
    piracy_hash_timed(model, cfg).map(|(h, _)| h)
}

pub fn piracy_hash_timed(
    model: &ModelWeights,
    cfg: &HashConfig,
) -> Result<(PiracyHash, PhaseTimings)> {
    cfg.validate()?;
    let start = Instant::now();
    let flat = model.flatten(TensorFilter::KernelsOnly)?;
    let selected = select_weights(&flat, &cfg.selection()?)?;
    drop(flat);
    let selection = start.elapsed();

    let start = Instant::now();
    let hos = hos_of_selected(&selected, cfg.segments)?;
    let structure = structure_sequence(model, cfg.capacity)?;
    let plain_hos = encode_sequence(&hos.to_vec(), cfg.bits)?;
    let plain_struct = encode_sequence(&structure.values, cfg.bits)?;
    let (hos_bits, struct_bits) = encrypt_pair(&plain_hos, &plain_struct, &cfg.key);
    let features = start.elapsed();

    Ok((
        PiracyHash {
            model_id: model.model_id().map(str::to_string),
            segments: cfg.segments,
            bits: cfg.bits,
            capacity: cfg.capacity,
            hos_bits,
            struct_bits,
            config_digest: cfg.piracy_digest(),
        },
        PhaseTimings {
            selection,
            features,
        },
    ))
}

/// Encrypts `hos ∥ structure` with one keystream and splits the result, so
/// the two parts never reuse keystream bits.
pub fn encrypt_pair(hos: &BitVector, structure: &BitVector, key: &str) -> (BitVector, BitVector) {
    let mut stream = KeyStream::new(key);
    let h = hos.xor_stream(stream.by_ref());
    let s = structure.xor_stream(stream);
    (h, s)
}
