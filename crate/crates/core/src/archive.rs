// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-file tensor archive.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! [0..8)        u64 N, length of the JSON header
//! [8..8+N)      UTF-8 JSON object: name -> {"dtype":"F32","shape":[..],"data_offsets":[b,e]}
//!               plus an optional "__metadata__" string map
//! [8+N..)       data region; offsets are relative to its start
//! ```
//!
//! This is the layout used by the common `.safetensors` checkpoint format,
//! restricted to `F32`. The writer orders tensors lexicographically by name,
//! pads the header with spaces to a multiple of 8 bytes and is therefore
//! byte-deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";
const F32: &str = "F32";

/// Parse and validation failures. Every per-tensor variant names the tensor.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive is {0} bytes, too short for the 8-byte header length")]
    TooShort(usize),

    #[error("truncated header: header claims {header_len} bytes but only {available} follow")]
    TruncatedHeader { header_len: u64, available: u64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor `{name}`: {reason}")]
    BadEntry { name: String, reason: String },

    #[error("tensor `{name}` overlaps tensor `{other}`")]
    Overlap { name: String, other: String },

    #[error("tensor `{name}` starts at {begin}, leaving a gap after byte {expected}")]
    Gap {
        name: String,
        begin: u64,
        expected: u64,
    },

    #[error("tensor `{name}` ends at {end} but the data region has {available} bytes")]
    TruncatedData {
        name: String,
        end: u64,
        available: u64,
    },

    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(u64),

    #[error("tensor names must be non-empty")]
    EmptyName,
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data_offsets: [u64; 2],
}

/// Parsed header of an archive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArchiveManifest {
    pub entries: BTreeMap<String, ArchiveEntry>,
    pub metadata: Option<BTreeMap<String, String>>,
}

pub type TensorMap = BTreeMap<String, Tensor>;

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

pub fn read_archive(path: impl AsRef<Path>) -> crate::Result<(ArchiveManifest, TensorMap)> {
    let bytes = std::fs::read(path)?;
    Ok(decode_archive(&bytes)?)
}

/// Parses an in-memory archive.
pub fn decode_archive(bytes: &[u8]) -> Result<(ArchiveManifest, TensorMap), ArchiveError> {
    if bytes.len() < 8 {
        return Err(ArchiveError::TooShort(bytes.len()));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[..8]);
    let header_len = u64::from_le_bytes(len_bytes);
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(ArchiveError::TruncatedHeader {
            header_len,
            available,
        });
    }
    let header_end = 8 + header_len as usize;
    let manifest = parse_header(&bytes[8..header_end])?;
    let data = &bytes[header_end..];
    validate_layout(&manifest, data.len() as u64)?;

    let mut tensors = TensorMap::new();
    for (name, entry) in &manifest.entries {
        let [begin, end] = entry.data_offsets;
        let raw = &data[begin as usize..end as usize];
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(entry.shape.clone(), values).map_err(|e| ArchiveError::BadEntry {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        tensors.insert(name.clone(), t);
    }
    Ok((manifest, tensors))
}

fn parse_header(raw: &[u8]) -> Result<ArchiveManifest, ArchiveError> {
    let text =
        std::str::from_utf8(raw).map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
    let serde_json::Value::Object(map) = value else {
        return Err(ArchiveError::MalformedHeader(
            "header is not a JSON object".into(),
        ));
    };
    let mut manifest = ArchiveManifest::default();
    for (name, v) in map {
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(v)
                .map_err(|e| ArchiveError::MalformedHeader(format!("{METADATA_KEY}: {e}")))?;
            manifest.metadata = Some(meta);
            continue;
        }
        if name.is_empty() {
            return Err(ArchiveError::EmptyName);
        }
        let entry: ArchiveEntry =
            serde_json::from_value(v).map_err(|e| ArchiveError::BadEntry {
                name: name.clone(),
                reason: e.to_string(),
            })?;
        if entry.dtype != F32 {
            return Err(ArchiveError::UnsupportedDtype {
                name,
                dtype: entry.dtype,
            });
        }
        manifest.entries.insert(name, entry);
    }
    Ok(manifest)
}

/// Checks that the byte ranges are well formed, sized for their shapes and
/// tile `[0, data_len)` exactly.
fn validate_layout(manifest: &ArchiveManifest, data_len: u64) -> Result<(), ArchiveError> {
    let mut spans: Vec<(&String, &ArchiveEntry)> = manifest.entries.iter().collect();
    for (name, e) in &spans {
        let [begin, end] = e.data_offsets;
        if end < begin {
            return Err(ArchiveError::BadEntry {
                name: (*name).clone(),
                reason: format!("data_offsets [{begin}, {end}] are reversed"),
            });
        }
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(ArchiveError::BadEntry {
                name: (*name).clone(),
                reason: format!("shape {:?} must have positive dimensions", e.shape),
            });
        }
        let want = e
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64));
        if want != Some(end - begin) {
            return Err(ArchiveError::BadEntry {
                name: (*name).clone(),
                reason: format!(
                    "byte length {} does not match shape {:?} in F32",
                    end - begin,
                    e.shape
                ),
            });
        }
    }
    spans.sort_by_key(|(name, e)| (e.data_offsets[0], e.data_offsets[1], (*name).clone()));
    let mut cursor = 0u64;
    let mut prev: Option<&String> = None;
    for (name, e) in spans {
        let [begin, end] = e.data_offsets;
        if begin < cursor {
            return Err(ArchiveError::Overlap {
                name: name.clone(),
                other: prev.cloned().unwrap_or_default(),
            });
        }
        if begin > cursor {
            return Err(ArchiveError::Gap {
                name: name.clone(),
                begin,
                expected: cursor,
            });
        }
        if end > data_len {
            return Err(ArchiveError::TruncatedData {
                name: name.clone(),
                end,
                available: data_len,
            });
        }
        cursor = end;
        prev = Some(name);
    }
    if cursor != data_len {
        return Err(ArchiveError::TrailingBytes(data_len - cursor));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Serialises tensors and metadata to the archive byte layout.
pub fn encode_archive(
    tensors: &TensorMap,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>, ArchiveError> {
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(metadata).expect("string map serialises"),
        );
    }
    let mut offset = 0u64;
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(ArchiveError::EmptyName);
        }
        let len = 4 * t.numel() as u64;
        let entry = ArchiveEntry {
            dtype: F32.to_string(),
            shape: t.shape().to_vec(),
            data_offsets: [offset, offset + len],
        };
        header.insert(
            name.clone(),
            serde_json::to_value(entry).expect("entry serialises"),
        );
        offset += len;
    }
    let mut json =
        serde_json::to_vec(&serde_json::Value::Object(header)).expect("header serialises");
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_archive(
    tensors: &TensorMap,
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> crate::Result<()> {
    let bytes = encode_archive(tensors, metadata)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_tensor() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(
            "t".into(),
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        m
    }

    fn with_header(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn single_tensor_roundtrip() {
        let m = one_tensor();
        let bytes = encode_archive(&m, &BTreeMap::new()).unwrap();
        let (manifest, back) = decode_archive(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.entries["t"].data_offsets, [0, 16]);
        assert!(manifest.metadata.is_none());
        assert_eq!(encode_archive(&back, &BTreeMap::new()).unwrap(), bytes);
    }

    #[test]
    fn empty_archive_is_valid() {
        let bytes = encode_archive(&TensorMap::new(), &BTreeMap::new()).unwrap();
        let (manifest, back) = decode_archive(&bytes).unwrap();
        assert!(manifest.entries.is_empty() && back.is_empty());
    }

    #[test]
    fn metadata_roundtrip_and_determinism() {
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        let a = encode_archive(&one_tensor(), &meta).unwrap();
        let b = encode_archive(&one_tensor(), &meta).unwrap();
        assert_eq!(a, b);
        let (manifest, _) = decode_archive(&a).unwrap();
        assert_eq!(manifest.metadata.unwrap()["format"], "pt");
    }

    #[test]
    fn three_tensors_tile_data_region() {
        let mut m = TensorMap::new();
        m.insert("c".into(), Tensor::from_vec(vec![1.0; 3]));
        m.insert("a".into(), Tensor::from_vec(vec![2.0; 5]));
        m.insert("b".into(), Tensor::zeros(&[2, 2]));
        let bytes = encode_archive(&m, &BTreeMap::new()).unwrap();
        let (manifest, _) = decode_archive(&bytes).unwrap();
        let mut spans: Vec<[u64; 2]> = manifest.entries.values().map(|e| e.data_offsets).collect();
        spans.sort();
        assert_eq!(spans, vec![[0, 20], [20, 36], [36, 48]]);
        // lexicographic name order decides placement
        assert_eq!(manifest.entries["a"].data_offsets[0], 0);
    }

    #[test]
    fn header_longer_than_file_is_truncated_header() {
        let mut bytes = encode_archive(&one_tensor(), &BTreeMap::new()).unwrap();
        bytes[..8].copy_from_slice(&10_000u64.to_le_bytes());
        assert!(matches!(
            decode_archive(&bytes),
            Err(ArchiveError::TruncatedHeader { .. })
        ));
        assert!(matches!(
            decode_archive(&[1, 2, 3]),
            Err(ArchiveError::TooShort(3))
        ));
    }

    #[test]
    fn malformed_and_unsupported_inputs() {
        let bad = with_header("{not json", &[]);
        assert!(matches!(
            decode_archive(&bad),
            Err(ArchiveError::MalformedHeader(_))
        ));
        let f16 = with_header(
            r#"{"w":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#,
            &[0; 4],
        );
        match decode_archive(&f16) {
            Err(ArchiveError::UnsupportedDtype { name, dtype }) => {
                assert_eq!((name.as_str(), dtype.as_str()), ("w", "F16"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlapping_gapped_and_short_ranges() {
        let overlap = with_header(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &[0; 12],
        );
        assert!(matches!(
            decode_archive(&overlap),
            Err(ArchiveError::Overlap { name, .. }) if name == "b"
        ));
        let gap = with_header(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#,
            &[0; 12],
        );
        assert!(matches!(
            decode_archive(&gap),
            Err(ArchiveError::Gap { name, .. }) if name == "b"
        ));
        let short = with_header(
            r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#,
            &[0; 8],
        );
        assert!(matches!(
            decode_archive(&short),
            Err(ArchiveError::TruncatedData { name, .. }) if name == "a"
        ));
        let sized = with_header(
            r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
            &[0; 8],
        );
        assert!(matches!(
            decode_archive(&sized),
            Err(ArchiveError::BadEntry { name, .. }) if name == "a"
        ));
        let trailing = with_header(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &[0; 8],
        );
        assert!(matches!(
            decode_archive(&trailing),
            Err(ArchiveError::TrailingBytes(4))
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(
            tensors in prop::collection::btree_map(
                "[a-z][a-z0-9_.]{0,12}",
                prop::collection::vec(any::<f32>(), 1..20),
                0..6,
            )
        ) {
            let map: TensorMap = tensors
                .into_iter()
                .map(|(k, v)| (k, Tensor::from_vec(v)))
                .collect();
            let bytes = encode_archive(&map, &BTreeMap::new()).unwrap();
            let (_, back) = decode_archive(&bytes).unwrap();
            prop_assert_eq!(back.len(), map.len());
            for (name, t) in &map {
                let b = &back[name];
                prop_assert_eq!(b.shape(), t.shape());
                let same = t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
            prop_assert_eq!(encode_archive(&back, &BTreeMap::new()).unwrap(), bytes);
        }

        #[test]
        fn corrupted_headers_never_panic(
            flips in prop::collection::vec((0usize..200, any::<u8>()), 1..8)
        ) {
            let mut m = one_tensor();
            m.insert("u".into(), Tensor::from_vec(vec![0.5; 7]));
            let mut bytes = encode_archive(&m, &BTreeMap::new()).unwrap();
            for (pos, val) in flips {
                let i = 8 + pos % (bytes.len() - 8);
                bytes[i] = val;
            }
            if let Ok((manifest, _)) = decode_archive(&bytes) {
                // anything accepted must still tile the data region
                let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
                let data_len = (bytes.len() - 8 - header_len) as u64;
                let total: u64 = manifest
                    .entries
                    .values()
                    .map(|e| e.data_offsets[1] - e.data_offsets[0])
                    .sum();
                prop_assert_eq!(total, data_len);
            }
        }
    }
}
