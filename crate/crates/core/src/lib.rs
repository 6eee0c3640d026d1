//! Training-free hashing of CNN weights.
//!
//! Two hashes are computed from a weight container. The *piracy hash*
//! summarizes the distribution of the largest weights with per-segment
//! skewness and kurtosis plus a coarse convolution-layer descriptor, and is
//! meant to survive pruning and light fine-tuning. The *tamper hash* runs
//! each parameter block's mean through a chaotic map so that even tiny edits
//! change the block's code, which localizes tampering.

pub mod bits;
pub mod chaos;
pub mod config;
pub mod encoding;
pub mod error;
pub mod hos_features;
pub mod keystream;
pub mod modsim;
pub mod registry;
pub mod similarity;
pub mod tamper_hash;
pub mod tensor_store;

pub use bits::BitVector;
pub use config::HashConfig;
pub use encoding::{piracy_hash, PiracyHash};
pub use error::{Error, Result};
pub use registry::{Registry, RegistryRecord};
pub use similarity::{weighted_distance, DistanceWeights, MatchResult, Verdict};
pub use tamper_hash::{locate_tampering, tamper_localization_hash, TamperHash, TamperReport};
pub use tensor_store::{load_container, save_container, ModelWeights};
