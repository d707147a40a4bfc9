//! Single-file tensor container.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8 JSON,
//! then the raw little-endian data. The header maps each tensor name to
//! `{"dtype", "shape", "data_offsets": [begin, end)}` with offsets relative to
//! the start of the data segment, plus an optional `__metadata__` object of
//! string pairs. Written files list keys in lexicographic order and pack the
//! data in name order with no padding, so encoding is canonical.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Value};

use wspurify_core::Dtype;

pub const METADATA_KEY: &str = "__metadata__";

/// Refuse headers above this size before allocating for them.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("file is {0} bytes, too short for the 8-byte header length")]
    TooShort(usize),
    #[error("header length {declared} exceeds the {available} bytes that follow")]
    HeaderLength { declared: u64, available: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate tensor name `{0}` in header")]
    DuplicateName(String),
    #[error("tensor `{name}`: {reason}")]
    BadEntry { name: String, reason: String },
    #[error("tensor `{name}` has unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}` has rank {rank}; only rank 1 and 2 are supported")]
    UnsupportedRank { name: String, rank: usize },
    #[error("tensor `{name}` ends at byte {end} but the data segment has {available}")]
    Truncated { name: String, end: usize, available: usize },
    #[error("tensor `{name}` starts at byte {begin}, expected {expected} (gap or overlap)")]
    Layout { name: String, begin: usize, expected: usize },
    #[error("{0} unreferenced bytes after the last tensor")]
    TrailingBytes(usize),
}

/// One decoded tensor, values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    /// Tensors in name order.
    pub tensors: Vec<RawTensor>,
    pub metadata: BTreeMap<String, String>,
}

/// Header object with its keys in file order, duplicates kept.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn encode(tensors: &[RawTensor], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut sorted: Vec<&RawTensor> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(metadata));
    }
    let mut offset = 0;
    for t in &sorted {
        let len = t.values.len() * t.dtype.size_bytes();
        header.insert(
            t.name.clone(),
            json!({ "dtype": t.dtype.as_str(), "shape": t.shape, "data_offsets": [offset, offset + len] }),
        );
        offset += len;
    }
    // serde_json's default map is ordered by key, which makes this canonical.
    let header = serde_json::to_vec(&Value::Object(header)).expect("header is plain JSON");
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &sorted {
        match t.dtype {
            Dtype::F32 => t.values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => t.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Container, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::TooShort(bytes.len()));
    }
    let declared = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let rest = &bytes[8..];
    if declared > MAX_HEADER_LEN || declared > rest.len() as u64 {
        return Err(FormatError::HeaderLength { declared, available: rest.len() });
    }
    let (header, data) = rest.split_at(declared as usize);
    let header = std::str::from_utf8(header).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    // Other writers pad the header with trailing spaces.
    let RawHeader(entries) =
        serde_json::from_str(header.trim_end()).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;

    let mut seen = std::collections::BTreeSet::new();
    let mut metadata = BTreeMap::new();
    let mut parsed = Vec::new();
    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| FormatError::MalformedHeader(format!("{METADATA_KEY}: {e}")))?;
            continue;
        }
        let entry: EntryHeader =
            serde_json::from_value(value).map_err(|e| FormatError::BadEntry { name: name.clone(), reason: e.to_string() })?;
        let dtype = Dtype::parse(&entry.dtype)
            .ok_or_else(|| FormatError::UnsupportedDtype { name: name.clone(), dtype: entry.dtype.clone() })?;
        if entry.shape.is_empty() || entry.shape.len() > 2 {
            return Err(FormatError::UnsupportedRank { name, rank: entry.shape.len() });
        }
        let [begin, end] = entry.data_offsets;
        let numel = entry.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let expected = numel.and_then(|n| n.checked_mul(dtype.size_bytes()));
        if end < begin || Some(end - begin) != expected {
            return Err(FormatError::BadEntry {
                name,
                reason: format!("offsets [{begin}, {end}) do not fit shape {:?} of {}", entry.shape, dtype),
            });
        }
        parsed.push((name, dtype, entry.shape, begin, end));
    }

    // Tensors must tile the data segment exactly.
    parsed.sort_by_key(|p| (p.3, p.4));
    let mut cursor = 0;
    let mut tensors = Vec::with_capacity(parsed.len());
    for (name, dtype, shape, begin, end) in parsed {
        if begin != cursor {
            return Err(FormatError::Layout { name, begin, expected: cursor });
        }
        if end > data.len() {
            return Err(FormatError::Truncated { name, end, available: data.len() });
        }
        let raw = &data[begin..end];
        let values = match dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        tensors.push(RawTensor { name, dtype, shape, values });
        cursor = end;
    }
    if cursor != data.len() {
        return Err(FormatError::TrailingBytes(data.len() - cursor));
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Container { tensors, metadata })
}
