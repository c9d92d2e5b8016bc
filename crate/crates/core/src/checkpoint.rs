//! Versioned binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a u64 length
//! followed by a JSON metadata block (epoch, seed, config, config hash, and a
//! tensor manifest), then the concatenated little-endian f64 payloads in
//! manifest order. Saving is deterministic, so save -> load -> save is
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"COOPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A named flat tensor in the checkpoint: parameters, momentum buffers, and
/// normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    epoch: usize,
    seed: u64,
    config_hash: u64,
    config: RunConfig,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub config_hash: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(epoch: usize, config: RunConfig, tensors: Vec<NamedTensor>) -> Checkpoint {
        let seed = config.train.seed;
        let config_hash = config.hash();
        Checkpoint {
            epoch,
            seed,
            config,
            config_hash,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            manifest.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                len: t.data.len(),
                offset,
            });
            offset += t.data.len();
        }
        let meta = Meta {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash,
            config: self.config.clone(),
            manifest,
        };
        let meta_json = serde_json::to_vec(&meta)?;

        let mut bytes =
            Vec::with_capacity(8 + 4 + 8 + meta_json.len() + offset * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&meta_json);
        for t in &self.tensors {
            for &v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(&format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + meta_len {
            return Err(fail("truncated metadata"));
        }
        let meta: Meta = serde_json::from_slice(&bytes[20..20 + meta_len])?;
        let payload = &bytes[20 + meta_len..];
        let mut tensors = Vec::with_capacity(meta.manifest.len());
        for entry in &meta.manifest {
            let start = entry.offset * 8;
            let end = start + entry.len * 8;
            if end > payload.len() {
                return Err(fail(&format!("tensor `{}` out of bounds", entry.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                data,
            });
        }
        Ok(Checkpoint {
            epoch: meta.epoch,
            seed: meta.seed,
            config: meta.config,
            config_hash: meta.config_hash,
            tensors,
        })
    }

    /// Reject checkpoints written under a different configuration.
    pub fn verify_config(&self, current: &RunConfig) -> Result<()> {
        let expected = current.hash();
        if self.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                found: self.config_hash,
                expected,
            });
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = RunConfig::desk_preset();
        let tensors = vec![
            NamedTensor {
                name: "teammate_a/stem/fc/weight".into(),
                shape: vec![2, 3],
                data: vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6],
            },
            NamedTensor {
                name: "momentum:teammate_a/stem/fc/weight".into(),
                shape: vec![2, 3],
                data: vec![0.0; 6],
            },
        ];
        Checkpoint::new(3, config, tensors)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = sample();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.tensors.len(), 2);
        assert_eq!(loaded.tensors[0].data, ckpt.tensors[0].data);
    }

    #[test]
    fn config_hash_mismatch_is_rejected() {
        let ckpt = sample();
        ckpt.verify_config(&RunConfig::desk_preset()).unwrap();
        let mut other = RunConfig::desk_preset();
        other.train.seed = 999;
        assert!(matches!(
            ckpt.verify_config(&other),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn garbage_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
