use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::encoding::PiracyHash;
use crate::error::{Error, Result};

/// Normalized Hamming distance: the fraction of differing positions.
pub fn hamming(a: &BitVector, b: &BitVector) -> Result<f64> {
    let diff = a.xor_count(b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("cannot compare empty bit vectors".into()));
    }
    Ok(diff as f64 / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceWeights {
    k1: f64,
    k2: f64,
    tau: f64,
}

impl DistanceWeights {
    pub fn new(k1: f64, k2: f64, tau: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k2 >= 0.0 && k1.is_finite() && k2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "distance weights must be non-negative, got k1={k1}, k2={k2}"
            )));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must be in (0, 1), got {tau}")));
        }
        Ok(DistanceWeights { k1, k2, tau })
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn k2(&self) -> f64 {
        self.k2
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn verdict(&self, distance: f64) -> Verdict {
        if distance < self.tau {
            Verdict::Similar
        } else {
            Verdict::Distinct
        }
    }
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights {
            k1: 0.8,
            k2: 0.2,
            tau: 0.32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Similar,
    Distinct,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Similar => "SIMILAR",
            Verdict::Distinct => "DISTINCT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub model_id: Option<String>,
    pub distance: f64,
    pub verdict: Verdict,
    pub d_hos: f64,
    pub d_struct: f64,
}

/// `k1 * d_hos + k2 * d_struct`, judged against `tau`.
///
/// The result carries the model id of `b`. Hashes made under different
/// settings or keys are refused.
pub fn weighted_distance(a: &PiracyHash, b: &PiracyHash, w: &DistanceWeights) -> Result<MatchResult> {
    if a.config_digest != b.config_digest {
        return Err(Error::ConfigMismatch(format!(
            "hash digests differ ({} vs {}); settings or key are not the same",
            a.config_digest, b.config_digest
        )));
    }
    if (a.segments, a.bits, a.capacity) != (b.segments, b.bits, b.capacity) {
        return Err(Error::ConfigMismatch(format!(
            "layouts differ: N/b/K {}/{}/{} vs {}/{}/{}",
            a.segments, a.bits, a.capacity, b.segments, b.bits, b.capacity
        )));
    }
    let d_hos = hamming(&a.hos_bits, &b.hos_bits)?;
    let d_struct = hamming(&a.struct_bits, &b.struct_bits)?;
    let distance = w.k1 * d_hos + w.k2 * d_struct;
    Ok(MatchResult {
        model_id: b.model_id.clone(),
        distance,
        verdict: w.verdict(distance),
        d_hos,
        d_struct,
    })
}
