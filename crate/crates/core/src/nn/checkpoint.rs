//! On-disk parameter snapshots.
//!
//! A checkpoint is a directory holding `manifest.json` — version, named
//! parameter shapes in payload order, and arbitrary hyperparameter JSON —
//! plus `params.bin`, the concatenated raw little-endian `f64` values of
//! every parameter in manifest order. Raw bytes keep the round trip
//! bit-exact; the manifest keeps it self-describing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter tensor and its shape, in payload order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Checkpoint header: layout of `params.bin` plus free-form hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub entries: Vec<ParamEntry>,
    pub hyper: serde_json::Value,
}

impl CheckpointManifest {
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }
}

/// Write `manifest.json` + `params.bin` into `dir` (created if missing).
/// Both files land via a temporary name + rename, so a crash mid-write never
/// leaves a plausible-looking but corrupt checkpoint behind.
pub fn save_checkpoint(dir: impl AsRef<Path>, manifest: &CheckpointManifest, flat: &[f64]) -> Result<()> {
    let dir = dir.as_ref();
    if manifest.total_params() != flat.len() {
        return Err(Error::Checkpoint(format!(
            "manifest describes {} values but payload has {}",
            manifest.total_params(),
            flat.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: dir.join("manifest.json"),
        source: e,
    })?;
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;

    let mut payload = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("params.bin"), &payload)
}

/// Read a checkpoint back; validates version and payload length.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, Vec<f64>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&json).map_err(|e| Error::Json {
            path: manifest_path,
            source: e,
        })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let bin_path = dir.join("params.bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = manifest.total_params();
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "params.bin holds {} bytes, manifest expects {}",
            bytes.len(),
            expected * 8
        )));
    }
    let flat = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();
    Ok((manifest, flat))
}

/// Write bytes to `path` through a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> CheckpointManifest {
        CheckpointManifest {
            version: CHECKPOINT_VERSION,
            entries: vec![
                ParamEntry {
                    name: "enc0.w".into(),
                    shape: vec![2, 1, 3, 3],
                },
                ParamEntry {
                    name: "enc0.b".into(),
                    shape: vec![2],
                },
            ],
            hyper: serde_json::json!({"seed": 7}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = sample_manifest();
        // Include values that expose any text-based serialization: subnormal,
        // negative zero, many significant digits.
        let mut flat: Vec<f64> = (0..20).map(|i| (i as f64 * 0.1234567891011).sin()).collect();
        flat[0] = -0.0;
        flat[1] = f64::MIN_POSITIVE / 2.0;
        save_checkpoint(dir.path(), &manifest, &flat).unwrap();
        let (m2, flat2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(flat.len(), flat2.len());
        for (a, b) in flat.iter().zip(&flat2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn save_rejects_wrong_payload_length() {
        let dir = tempfile::tempdir().unwrap();
        let err = save_checkpoint(dir.path(), &sample_manifest(), &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn load_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = sample_manifest();
        save_checkpoint(dir.path(), &manifest, &vec![0.5; 20]).unwrap();
        let bin = dir.path().join("params.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn load_rejects_future_version() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = sample_manifest();
        save_checkpoint(dir.path(), &manifest, &vec![0.5; 20]).unwrap();
        manifest.version = CHECKPOINT_VERSION + 1;
        let json = serde_json::to_string(&manifest).unwrap();
        fs::write(dir.path().join("manifest.json"), json).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }
}
