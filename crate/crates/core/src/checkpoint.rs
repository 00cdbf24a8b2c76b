//! Shared checkpoint format: a directory holding `manifest.json` (ordered
//! entry table with shapes, byte offsets, freeze flags, a config snapshot,
//! arbitrary extras, and a content hash) next to `weights.bin`, the
//! little-endian f32 data concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into weights.bin.
    pub offset: u64,
    /// Byte length within weights.bin.
    pub len: u64,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Snapshot of the configuration that produced these weights.
    pub config: serde_json::Value,
    /// Extra sections (mode, normalization statistics, ...); free-form.
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
    /// Hex SHA-256 of weights.bin.
    pub content_hash: String,
}

/// Write `params` (in sorted-name order) plus a config snapshot and extras.
pub fn save(
    dir: &Path,
    params: &ParameterSet,
    config: serde_json::Value,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::with_capacity(params.total_elements() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let offset = blob.len() as u64;
        for &v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: blob.len() as u64 - offset,
            frozen: p.frozen,
        });
    }
    let hash = hex_digest(&blob);
    let manifest = CheckpointManifest {
        format_version: 1,
        entries,
        config,
        extra,
        content_hash: hash,
    };
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, &blob).map_err(|e| Error::io(&weights_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Load a checkpoint, verifying the content hash and every entry's bounds.
pub fn load(dir: &Path) -> Result<(ParameterSet, CheckpointManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&raw).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    if hex_digest(&blob) != manifest.content_hash {
        return Err(Error::format(
            &weights_path,
            "content hash mismatch; checkpoint corrupt".to_string(),
        ));
    }
    let mut params = ParameterSet::new();
    for e in &manifest.entries {
        if e.dtype != "f32" {
            return Err(Error::format(
                &manifest_path,
                format!("entry {} has unsupported dtype {}", e.name, e.dtype),
            ));
        }
        let start = e.offset as usize;
        let end = start + e.len as usize;
        if end > blob.len() || e.len % 4 != 0 {
            return Err(Error::format(
                &manifest_path,
                format!("entry {} spans {start}..{end} outside blob", e.name),
            ));
        }
        let numel: usize = e.shape.iter().product();
        if numel * 4 != e.len as usize {
            return Err(Error::format(
                &manifest_path,
                format!("entry {} shape {:?} disagrees with byte length {}", e.name, e.shape, e.len),
            ));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        if e.frozen {
            if let Some(p) = params.get_mut(&e.name) {
                p.frozen = true;
            }
        }
    }
    Ok((params, manifest))
}

/// Raw bytes of one section (all entries sharing a name prefix), in
/// manifest order. Used for freeze-invariance checks.
pub fn section_bytes(dir: &Path, prefix: &str) -> Result<Vec<u8>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&raw).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let mut out = Vec::new();
    for e in &manifest.entries {
        if e.name.starts_with(prefix) {
            out.extend_from_slice(&blob[e.offset as usize..(e.offset + e.len) as usize]);
        }
    }
    Ok(out)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("backbone.w", Tensor::new(vec![2, 2], vec![1.5, -2.25, 0.0, 7.0]).unwrap())
            .unwrap();
        ps.insert("head.w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        ps.set_frozen_by_prefix("backbone.", true);
        ps
    }

    #[test]
    fn roundtrip_preserves_bits_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let ps = sample_params();
        save(dir.path(), &ps, serde_json::json!({"d": 4}), Default::default()).unwrap();
        let (loaded, manifest) = load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(
            loaded.get("backbone.w").unwrap().tensor.data(),
            ps.get("backbone.w").unwrap().tensor.data()
        );
        assert!(loaded.get("backbone.w").unwrap().frozen);
        assert!(!loaded.get("head.w").unwrap().frozen);
        assert_eq!(manifest.config["d"], 4);
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &sample_params(), serde_json::Value::Null, Default::default()).unwrap();
        let weights = dir.path().join(WEIGHTS_FILE);
        let mut blob = fs::read(&weights).unwrap();
        blob[0] ^= 0xff;
        fs::write(&weights, blob).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn section_bytes_isolates_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let ps = sample_params();
        save(dir.path(), &ps, serde_json::Value::Null, Default::default()).unwrap();
        let backbone = section_bytes(dir.path(), "backbone.").unwrap();
        assert_eq!(backbone.len(), 16);
        let head = section_bytes(dir.path(), "head.").unwrap();
        assert_eq!(head.len(), 12);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save(a.path(), &sample_params(), serde_json::json!({"k": 1}), Default::default()).unwrap();
        save(b.path(), &sample_params(), serde_json::json!({"k": 1}), Default::default()).unwrap();
        assert_eq!(
            fs::read(a.path().join(WEIGHTS_FILE)).unwrap(),
            fs::read(b.path().join(WEIGHTS_FILE)).unwrap()
        );
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }
}
