//! Tensor checkpoint files.
//!
//! A checkpoint is a directory with two files:
//! - `manifest.json`: entry names, shapes and byte offsets, plus an open
//!   `meta` blob for the caller (training state, config fingerprint, ...);
//! - `payload.bin`: the concatenated tensor data as little-endian f64.
//!
//! Loading validates shapes against offsets and the payload length, so a
//! truncated or edited payload fails loudly instead of yielding garbage.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const FORMAT_TAG: &str = "cmlab-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this entry inside `payload.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub entries: Vec<CheckpointEntry>,
    /// Total payload size in bytes, for truncation detection.
    pub payload_bytes: u64,
    /// Caller-owned metadata; opaque to this module.
    pub meta: serde_json::Value,
}

/// Writes `entries` (name, shape, values) and `meta` to `dir`, creating it.
/// Entry order is preserved and determines payload layout.
pub fn save_checkpoint(
    dir: &Path,
    entries: &[(String, Vec<usize>, Vec<f64>)],
    meta: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest =
        CheckpointManifest { format: FORMAT_TAG.to_string(), entries: Vec::new(), payload_bytes: 0, meta };
    let mut payload: Vec<u8> = Vec::new();
    for (name, shape, data) in entries {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "entry {name}: shape {shape:?} disagrees with {} values",
                data.len()
            )));
        }
        manifest.entries.push(CheckpointEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.payload_bytes = payload.len() as u64;
    let payload_path = dir.join("payload.bin");
    let mut f = fs::File::create(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&payload_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Loads a checkpoint directory; returns entries in manifest order plus the
/// caller metadata.
pub fn load_checkpoint(dir: &Path) -> Result<(Vec<(String, Vec<usize>, Vec<f64>)>, serde_json::Value)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?} (expected {FORMAT_TAG:?})",
            manifest.format
        )));
    }
    let payload_path = dir.join("payload.bin");
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but manifest promises {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "entry {} [{start}..{end}) overruns payload of {} bytes",
                e.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        out.push((e.name.clone(), e.shape.clone(), data));
    }
    Ok((out, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ("a/w".to_string(), vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.7e300]),
            ("b".to_string(), vec![3], vec![0.1, 0.2, 0.3]),
        ];
        let meta = serde_json::json!({"iteration": 42});
        save_checkpoint(dir.path(), &entries, meta.clone()).unwrap();
        let (loaded, meta2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.len(), 2);
        for ((n1, s1, d1), (n2, s2, d2)) in entries.iter().zip(&loaded) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(d1.len(), d2.len());
            for (a, b) in d1.iter().zip(d2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![("w".to_string(), vec![4], vec![1.0, 2.0, 3.0, 4.0])];
        save_checkpoint(dir.path(), &entries, serde_json::Value::Null).unwrap();
        let payload = dir.path().join("payload.bin");
        let bytes = std::fs::read(&payload).unwrap();
        std::fs::write(&payload, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn shape_data_disagreement_is_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![("w".to_string(), vec![4], vec![1.0, 2.0])];
        assert!(save_checkpoint(dir.path(), &entries, serde_json::Value::Null).is_err());
    }
}
