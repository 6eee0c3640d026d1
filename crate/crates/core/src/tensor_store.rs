//! Reading and writing the weight container format.
//!
//! A container is laid out as
//!
//! ```text
//! [u64 little-endian header length n][n bytes of JSON header][raw little-endian data]
//! ```
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets"}`, with
//! offsets relative to the start of the data block. An optional `"__meta__"`
//! entry carries `model_id` and `conv_layer_flags`. Header order is the layer
//! order: every consumer walks tensors in exactly the order they were written.
//!
//! Elements are widened to `f64` on load. `F32` tensors keep their tag and are
//! narrowed back on save, so a load/save cycle is bit-exact for either dtype.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Reserved header key for model-level metadata.
pub const META_KEY: &str = "__meta__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "F32" => Ok(DType::F32),
            "F64" => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    /// Rounds a value to what this dtype can store.
    fn narrow(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which tensors a flattening pass visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorFilter {
    /// Tensors of rank >= 2: convolution and fully-connected kernels.
    KernelsOnly,
    /// Every tensor, biases and normalization vectors included.
    All,
}

impl TensorFilter {
    pub fn admits(self, meta: &TensorMeta) -> bool {
        match self {
            TensorFilter::KernelsOnly => meta.shape.len() >= 2,
            TensorFilter::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// `[begin, end)` byte offsets into the data block.
    pub byte_range: (u64, u64),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    meta: TensorMeta,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from row-major values. `F32` tensors have their values
    /// rounded to single precision.
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor `{name}`: shape {shape:?} holds {numel} elements, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name, index });
        }
        let values = if dtype == DType::F64 {
            values
        } else {
            values.into_iter().map(|v| dtype.narrow(v)).collect()
        };
        Ok(Tensor {
            meta: TensorMeta {
                name,
                dtype,
                shape,
                byte_range: (0, 0),
            },
            values,
        })
    }

    pub fn meta(&self) -> &TensorMeta {
        &self.meta
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same name, dtype and shape with new contents.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(
            self.meta.name.clone(),
            self.meta.dtype,
            self.meta.shape.clone(),
            values,
        )
    }
}

/// An ordered, immutable set of named weight tensors.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    model_id: Option<String>,
    conv_layer_flags: Option<Vec<String>>,
    tensors: Vec<Tensor>,
}

impl ModelWeights {
    /// Assembles a model, assigning contiguous byte ranges in the given order.
    pub fn new(
        tensors: Vec<Tensor>,
        model_id: Option<String>,
        conv_layer_flags: Option<Vec<String>>,
    ) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::NoTensors);
        }
        let mut seen = HashSet::new();
        for t in &tensors {
            if t.meta.name == META_KEY {
                return Err(Error::InvalidArgument(format!(
                    "`{META_KEY}` is reserved and cannot name a tensor"
                )));
            }
            if !seen.insert(t.meta.name.as_str()) {
                return Err(Error::Container(format!(
                    "duplicate tensor name `{}`",
                    t.meta.name
                )));
            }
        }
        if let Some(flags) = &conv_layer_flags {
            check_flags(flags, &seen)?;
        }
        let mut offset = 0u64;
        let tensors = tensors
            .into_iter()
            .map(|mut t| {
                let len = (t.meta.numel() * t.meta.dtype.size()) as u64;
                t.meta.byte_range = (offset, offset + len);
                offset += len;
                t
            })
            .collect();
        Ok(ModelWeights {
            model_id,
            conv_layer_flags,
            tensors,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn model_id(&self) -> Option<&str> {
        self.model_id.as_deref()
    }

    pub fn conv_layer_flags(&self) -> Option<&[String]> {
        self.conv_layer_flags.as_deref()
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = Some(id.into());
        self
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.meta.numel()).sum()
    }

    /// Per-tensor convolution flag. Uses `conv_layer_flags` from the metadata
    /// when present, otherwise treats rank-4 tensors as convolutions.
    pub fn conv_mask(&self) -> Vec<bool> {
        match &self.conv_layer_flags {
            Some(flags) => {
                let flags: HashSet<&str> = flags.iter().map(String::as_str).collect();
                self.tensors
                    .iter()
                    .map(|t| flags.contains(t.name()))
                    .collect()
            }
            None => self.tensors.iter().map(|t| t.meta.rank() == 4).collect(),
        }
    }

    /// Concatenates the selected tensors, each flattened row-major, in layer
    /// order.
    pub fn flatten(&self, filter: TensorFilter) -> Result<Vec<f64>> {
        let len: usize = self
            .tensors
            .iter()
            .filter(|t| filter.admits(&t.meta))
            .map(|t| t.values.len())
            .sum();
        if len == 0 {
            return Err(Error::EmptyWeights);
        }
        let mut out = Vec::with_capacity(len);
        for t in self.tensors.iter().filter(|t| filter.admits(&t.meta)) {
            out.extend_from_slice(&t.values);
        }
        Ok(out)
    }

    /// Inverse of [`flatten`](Self::flatten): writes `flat` back over the
    /// tensors admitted by `filter`, leaving the others untouched.
    pub fn with_flat(&self, filter: TensorFilter, flat: &[f64]) -> Result<ModelWeights> {
        let expected: usize = self
            .tensors
            .iter()
            .filter(|t| filter.admits(&t.meta))
            .map(|t| t.values.len())
            .sum();
        if expected != flat.len() {
            return Err(Error::LengthMismatch {
                left: expected,
                right: flat.len(),
            });
        }
        let mut cursor = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if filter.admits(&t.meta) {
                let n = t.values.len();
                tensors.push(t.with_values(flat[cursor..cursor + n].to_vec())?);
                cursor += n;
            } else {
                tensors.push(t.clone());
            }
        }
        ModelWeights::new(
            tensors,
            self.model_id.clone(),
            self.conv_layer_flags.clone(),
        )
    }

    /// Bitwise equality of every element plus identical metadata.
    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        self.model_id == other.model_id
            && self.conv_layer_flags == other.conv_layer_flags
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.meta == b.meta
                    && a.values.len() == b.values.len()
                    && a
                        .values
                        .iter()
                        .zip(&b.values)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn check_flags(flags: &[String], names: &HashSet<&str>) -> Result<()> {
    for f in flags {
        if !names.contains(f.as_str()) {
            return Err(Error::Container(format!(
                "conv_layer_flags names unknown tensor `{f}`"
            )));
        }
    }
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

pub fn save_container(model: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_container(model)).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderTensor {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (u64, u64),
}

#[derive(Deserialize, Serialize, Default)]
struct HeaderMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv_layer_flags: Option<Vec<String>>,
}

/// Header entries in document order. serde_json maps silently keep the last
/// of several duplicate keys, so this visitor collects pairs itself.
struct OrderedEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                let mut seen = HashSet::new();
                while let Some((key, value)) = map.next_entry::<String, Value>()? {
                    if !seen.insert(key.clone()) {
                        return Err(de::Error::custom(format!("duplicate key `{key}`")));
                    }
                    entries.push((key, value));
                }
                Ok(OrderedEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 8 {
        return Err(Error::Container(format!(
            "malformed header length: file is {} bytes",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte slice"));
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::Container(format!(
                "malformed header length: {header_len} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::Container(format!("header is not UTF-8: {e}")))?;
    let OrderedEntries(entries) = serde_json::from_str(header)
        .map_err(|e| Error::Container(format!("header is not valid JSON: {e}")))?;
    let data = &bytes[header_end..];

    let mut meta = HeaderMeta::default();
    let mut metas = Vec::with_capacity(entries.len());
    for (name, value) in entries {
        if name == META_KEY {
            meta = serde_json::from_value(value)
                .map_err(|e| Error::Container(format!("bad `{META_KEY}` entry: {e}")))?;
            continue;
        }
        let entry: HeaderTensor = serde_json::from_value(value)
            .map_err(|e| Error::Container(format!("bad entry for tensor `{name}`: {e}")))?;
        let dtype = DType::parse(&entry.dtype)?;
        let (begin, end) = entry.data_offsets;
        if begin > end || end > data.len() as u64 {
            return Err(Error::OutOfBounds {
                name,
                begin,
                end,
                data_len: data.len() as u64,
            });
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Container(format!("tensor `{name}`: shape overflows")))?;
        if (numel as u64).checked_mul(dtype.size() as u64) != Some(end - begin) {
            return Err(Error::Container(format!(
                "tensor `{name}`: shape {:?} of {dtype} needs {} bytes, range holds {}",
                entry.shape,
                numel as u128 * dtype.size() as u128,
                end - begin
            )));
        }
        metas.push(TensorMeta {
            name,
            dtype,
            shape: entry.shape,
            byte_range: (begin, end),
        });
    }
    if metas.is_empty() {
        return Err(Error::NoTensors);
    }

    let mut by_start: Vec<&TensorMeta> = metas.iter().filter(|m| m.numel() > 0).collect();
    by_start.sort_by_key(|m| m.byte_range);
    for pair in by_start.windows(2) {
        if pair[1].byte_range.0 < pair[0].byte_range.1 {
            return Err(Error::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    if let Some(flags) = &meta.conv_layer_flags {
        let names = metas.iter().map(|m| m.name.as_str()).collect();
        check_flags(flags, &names)?;
    }

    let mut tensors = Vec::with_capacity(metas.len());
    for m in metas {
        let raw = &data[m.byte_range.0 as usize..m.byte_range.1 as usize];
        let values: Vec<f64> = match m.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: m.name,
                index,
            });
        }
        tensors.push(Tensor { meta: m, values });
    }

    // Keep the on-disk offsets; only the in-memory constructor reassigns them.
    Ok(ModelWeights {
        model_id: meta.model_id,
        conv_layer_flags: meta.conv_layer_flags,
        tensors,
    })
}

pub fn encode_container(model: &ModelWeights) -> Vec<u8> {
    let mut header = Map::new();
    let meta = HeaderMeta {
        model_id: model.model_id.clone(),
        conv_layer_flags: model.conv_layer_flags.clone(),
    };
    if meta.model_id.is_some() || meta.conv_layer_flags.is_some() {
        header.insert(
            META_KEY.to_string(),
            serde_json::to_value(&meta).expect("metadata serializes"),
        );
    }
    // Lay tensors out contiguously in header order, whatever their offsets
    // were in the file they came from.
    let mut offset = 0u64;
    for t in &model.tensors {
        let len = (t.values.len() * t.meta.dtype.size()) as u64;
        header.insert(
            t.meta.name.clone(),
            json!({
                "dtype": t.meta.dtype.tag(),
                "shape": t.meta.shape,
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header = serde_json::to_string(&header).expect("header serializes");
    while header.len() % 8 != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in &model.tensors {
        match t.meta.dtype {
            DType::F32 => {
                for &v in &t.values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &t.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}
