//! Block-wise tamper-localization hash.
//!
//! All parameters are flattened, min-max normalized, split into `B` blocks,
//! and each block mean is pushed through the chaotic map. The final state is
//! kept as a 17-bit code: a sign bit and the first four significant decimal
//! digits. Comparing two hashes flags the blocks whose codes differ.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::chaos::chaotic_iterate;
use crate::config::HashConfig;
use crate::error::{Error, Result};
use crate::hos_features::partition_ranges;
use crate::keystream::KeyStream;
use crate::tensor_store::{ModelWeights, TensorFilter};

pub const CODE_BITS: usize = 17;
pub const TAMPER_FORMAT_VERSION: u32 = 1;

/// Contiguous block ranges over `total` elements, longer blocks first.
pub fn block_partition(total: usize, blocks: usize) -> Result<Vec<Range<usize>>> {
    if blocks == 0 {
        return Err(Error::InvalidArgument("block count must be positive".into()));
    }
    if total < blocks {
        return Err(Error::InvalidArgument(format!(
            "cannot split {total} parameters into {blocks} blocks"
        )));
    }
    Ok(partition_ranges(total, blocks))
}

/// Sign bit followed by the first four significant decimal digits of `|x|`,
/// truncated, four bits each. The decimal exponent is not encoded.
pub fn encode_state(x: f64) -> u32 {
    let sign = u32::from(x < 0.0);
    let mut code = sign;
    for d in leading_digits(x.abs()) {
        code = (code << 4) | d;
    }
    code
}

/// The four leading digits of the shortest decimal form that reads back as
/// `x`; zero gives `[0; 4]`.
fn leading_digits(x: f64) -> [u32; 4] {
    let mut out = [0; 4];
    if x == 0.0 {
        return out;
    }
    let text = format!("{x:e}");
    let mantissa = text.split('e').next().expect("exponent form");
    for (slot, d) in out
        .iter_mut()
        .zip(mantissa.chars().filter_map(|c| c.to_digit(10)))
    {
        *slot = d;
    }
    out
}

/// How block means become codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperScheme {
    /// Mean through the chaotic map, then digit-encoded.
    #[default]
    Chaotic,
    /// Mean digit-encoded directly. Kept as a comparison baseline.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockFeature {
    pub index: usize,
    pub mean: f64,
    pub final_x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TamperHash {
    pub model_id: Option<String>,
    pub scheme: TamperScheme,
    pub total_params: usize,
    pub iterations: usize,
    pub mu: f64,
    pub k: f64,
    /// Encrypted 17-bit codes, one per block.
    pub codes: Vec<u32>,
    pub config_digest: String,
}

impl TamperHash {
    pub fn blocks(&self) -> usize {
        self.codes.len()
    }

    pub fn boundaries(&self) -> Vec<Range<usize>> {
        partition_ranges(self.total_params, self.codes.len())
    }

    pub fn to_bits(&self) -> BitVector {
        let mut bits = BitVector::new();
        for &c in &self.codes {
            bits.push_uint(u64::from(c), CODE_BITS);
        }
        bits
    }

    pub fn to_record(&self) -> TamperHashRecord {
        TamperHashRecord {
            version: TAMPER_FORMAT_VERSION,
            model_id: self.model_id.clone(),
            scheme: self.scheme,
            b: self.codes.len(),
            total_params: self.total_params,
            iterations: self.iterations,
            mu: self.mu,
            k: self.k,
            codes: self.to_bits().to_hex(),
            config_digest: self.config_digest.clone(),
        }
    }

    pub fn from_record(rec: &TamperHashRecord) -> Result<Self> {
        if rec.version != TAMPER_FORMAT_VERSION {
            return Err(Error::HashFormat(format!("unsupported version {}", rec.version)));
        }
        if rec.b == 0 || rec.total_params < rec.b {
            return Err(Error::HashFormat(format!(
                "{} blocks cannot partition {} parameters",
                rec.b, rec.total_params
            )));
        }
        let bits = BitVector::from_hex(&rec.codes, rec.b * CODE_BITS)?;
        let codes = (0..rec.b)
            .map(|i| bits.read_uint(i * CODE_BITS, CODE_BITS) as u32)
            .collect();
        Ok(TamperHash {
            model_id: rec.model_id.clone(),
            scheme: rec.scheme,
            total_params: rec.total_params,
            iterations: rec.iterations,
            mu: rec.mu,
            k: rec.k,
            codes,
            config_digest: rec.config_digest.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: TamperHashRecord =
            serde_json::from_str(text.trim()).map_err(|e| Error::HashFormat(e.to_string()))?;
        TamperHash::from_record(&rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TamperHash::from_json(&text)
    }
}

/// On-disk form of a [`TamperHash`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperHashRecord {
    pub version: u32,
    pub model_id: Option<String>,
    #[serde(default)]
    pub scheme: TamperScheme,
    #[serde(rename = "B")]
    pub b: usize,
    pub total_params: usize,
    pub iterations: usize,
    pub mu: f64,
    pub k: f64,
    pub codes: String,
    pub config_digest: String,
}

/// Means of the min-max normalized parameters over each block.
pub fn block_means(flat: &[f64], blocks: usize) -> Result<Vec<f64>> {
    let ranges = block_partition(flat.len(), blocks)?;
    let (min, max) = flat
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    Ok(ranges
        .into_par_iter()
        .map(|r| {
            let n = r.len() as f64;
            if span > 0.0 {
                flat[r].iter().map(|v| (v - min) / span).sum::<f64>() / n
            } else {
                0.5
            }
        })
        .collect())
}

pub fn block_features(model: &ModelWeights, cfg: &HashConfig) -> Result<Vec<BlockFeature>> {
    let params = cfg.chaos()?;
    let flat = model.flatten(TensorFilter::All)?;
    let means = block_means(&flat, cfg.blocks)?;
    drop(flat);
    means
        .into_par_iter()
        .enumerate()
        .map(|(index, mean)| {
            let final_x = chaotic_iterate(mean, &params).map_err(|e| match e {
                Error::MapDivergence { step } => Error::BlockDivergence { block: index, step },
                other => other,
            })?;
            Ok(BlockFeature {
                index,
                mean,
                final_x,
            })
        })
        .collect()
}

pub fn tamper_localization_hash(model: &ModelWeights, cfg: &HashConfig) -> Result<TamperHash> {
    tamper_hash_with(model, cfg, TamperScheme::Chaotic)
}

/// The comparison baseline: block means are encoded without the map.
pub fn direct_tamper_hash(model: &ModelWeights, cfg: &HashConfig) -> Result<TamperHash> {
    tamper_hash_with(model, cfg, TamperScheme::Direct)
}

pub fn tamper_hash_with(
    model: &ModelWeights,
    cfg: &HashConfig,
    scheme: TamperScheme,
) -> Result<TamperHash> {
    cfg.validate()?;
    let states: Vec<f64> = match scheme {
        TamperScheme::Chaotic => block_features(model, cfg)?
            .into_iter()
            .map(|f| f.final_x)
            .collect(),
        TamperScheme::Direct => block_means(&model.flatten(TensorFilter::All)?, cfg.blocks)?,
    };
    let codes = states
        .iter()
        .enumerate()
        .map(|(i, &x)| encrypt_code(encode_state(x), &cfg.key, i))
        .collect();
    let mut config_digest = cfg.tamper_digest();
    if scheme == TamperScheme::Direct {
        config_digest.push_str("-direct");
    }
    Ok(TamperHash {
        model_id: model.model_id().map(str::to_string),
        scheme,
        total_params: model.total_params(),
        iterations: cfg.iterations,
        mu: cfg.mu,
        k: cfg.k_map,
        codes,
        config_digest,
    })
}

/// XORs a code with the first 17 bits of the block's own keystream.
pub fn encrypt_code(code: u32, key: &str, block: usize) -> u32 {
    let pad = KeyStream::for_block(key, block)
        .take(CODE_BITS)
        .fold(0u32, |acc, b| (acc << 1) | u32::from(b));
    code ^ pad
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TamperReport {
    pub flagged: Vec<usize>,
    /// Ground-truth tampered block count.
    pub eta: Option<usize>,
    /// Tampered blocks that were flagged.
    pub eta_prime: Option<usize>,
    /// Localization accuracy `eta' / eta`; absent without ground truth or
    /// when nothing was tampered.
    pub r_t: Option<f64>,
    pub false_flags: Option<usize>,
}

impl fmt::Display for TamperReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flagged: Vec<String> = self.flagged.iter().map(usize::to_string).collect();
        writeln!(f, "flagged: {} [{}]", self.flagged.len(), flagged.join(","))?;
        let show = |v: Option<usize>| v.map_or_else(|| "n/a".to_string(), |n| n.to_string());
        writeln!(f, "eta: {}", show(self.eta))?;
        writeln!(f, "eta_prime: {}", show(self.eta_prime))?;
        match self.r_t {
            Some(r) => writeln!(f, "R_t: {r:.6}")?,
            None => writeln!(f, "R_t: n/a")?,
        }
        write!(f, "false_flags: {}", show(self.false_flags))
    }
}

/// Flags the blocks whose codes differ and scores them against `truth`.
pub fn locate_tampering(
    reference: &TamperHash,
    test: &TamperHash,
    truth: Option<&BTreeSet<usize>>,
) -> Result<TamperReport> {
    if reference.config_digest != test.config_digest {
        return Err(Error::ConfigMismatch(format!(
            "tamper digests differ ({} vs {})",
            reference.config_digest, test.config_digest
        )));
    }
    if reference.codes.len() != test.codes.len() || reference.total_params != test.total_params {
        return Err(Error::ConfigMismatch(format!(
            "block layouts differ: {} blocks over {} vs {} blocks over {}",
            reference.codes.len(),
            reference.total_params,
            test.codes.len(),
            test.total_params
        )));
    }
    let flagged: Vec<usize> = reference
        .codes
        .iter()
        .zip(&test.codes)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| i)
        .collect();
    let Some(truth) = truth else {
        return Ok(TamperReport {
            flagged,
            eta: None,
            eta_prime: None,
            r_t: None,
            false_flags: None,
        });
    };
    if let Some(&out) = truth.iter().find(|&&i| i >= reference.codes.len()) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth block {out} is outside 0..{}",
            reference.codes.len()
        )));
    }
    let hits = flagged.iter().filter(|i| truth.contains(i)).count();
    let eta = truth.len();
    Ok(TamperReport {
        eta: Some(eta),
        eta_prime: Some(hits),
        r_t: (eta > 0).then(|| hits as f64 / eta as f64),
        false_flags: Some(flagged.len() - hits),
        flagged,
    })
}
