//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the arrays it lists as little-endian `f64`, and a SHA-256 of
//! everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DAVLAB\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// A pretrained discrete denoiser.
    Pretrained,
    /// Alignment state after a completed epoch.
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    crate_version: String,
    config_hash: String,
    epoch: usize,
    seed: u64,
    adam_step: u64,
    arrays: Vec<(String, usize)>,
    metrics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_hash: String,
    /// Last completed epoch.
    pub epoch: usize,
    /// Root seed; per-epoch streams are derived from it and the epoch.
    pub seed: u64,
    pub adam_step: u64,
    /// Named parameter and optimizer arrays, in file order.
    pub arrays: Vec<(String, Vec<f64>)>,
    /// Metrics rows written so far, as CSV lines.
    pub metrics: Vec<String>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            seed: self.seed,
            adam_step: self.adam_step,
            arrays: self.arrays.iter().map(|(n, a)| (n.clone(), a.len())).collect(),
            metrics: self.metrics.clone(),
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(32 + h.len() + 8 * self.arrays.iter().map(|a| a.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, a) in &self.arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut pos = hend;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for (name, len) in header.arrays {
            let end = len
                .checked_mul(8)
                .and_then(|n| n.checked_add(pos))
                .filter(|&e| e <= body.len())
                .ok_or_else(|| bad("truncated array data"))?;
            let a = body[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, a));
            pos = end;
        }
        if pos != body.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        Ok(Self {
            kind: header.kind,
            config_hash: header.config_hash,
            epoch: header.epoch,
            seed: header.seed,
            adam_step: header.adam_step,
            arrays,
            metrics: header.metrics,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the checkpoint was written for a config with `hash`.
    pub fn check_hash(&self, hash: &str) -> Result<()> {
        if self.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, config {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}
