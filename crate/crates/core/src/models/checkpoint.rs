//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       4 bytes  "KDCK"
//! version     u32      1
//! header_len  u32      byte length of the JSON header
//! header      JSON     {role, fingerprint, members: [{spec, class_count, seed, param_len, frozen}]}
//! params      f32[]    members' parameter buffers, concatenated in order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::Network;
use super::spec::BackboneSpec;
use crate::error::{Error, Result};
use crate::types::Role;

const MAGIC: &[u8; 4] = b"KDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained (or freshly initialised) networks for one cascade stage. The
/// teacher checkpoint holds every ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    /// Hash of the configuration that produced the checkpoint; used for
    /// resuming a pipeline.
    pub fingerprint: String,
    pub members: Vec<Network>,
}

#[derive(Serialize, Deserialize)]
struct MemberHeader {
    spec: BackboneSpec,
    class_count: usize,
    seed: u64,
    param_len: usize,
    frozen: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    role: Role,
    fingerprint: String,
    members: Vec<MemberHeader>,
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Checkpoint {
    pub fn new(role: Role, fingerprint: impl Into<String>, members: Vec<Network>) -> Self {
        Checkpoint {
            role,
            fingerprint: fingerprint.into(),
            members,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            role: self.role,
            fingerprint: self.fingerprint.clone(),
            members: self
                .members
                .iter()
                .map(|m| MemberHeader {
                    spec: m.spec().clone(),
                    class_count: m.class_count(),
                    seed: m.seed(),
                    param_len: m.param_len(),
                    frozen: m.blocks().iter().filter(|b| b.frozen).map(|b| b.name.clone()).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out =
            Vec::with_capacity(12 + json.len() + 4 * self.members.iter().map(|m| m.param_len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for m in &self.members {
            for v in m.params() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Content hash of the serialised checkpoint.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Writes the checkpoint and returns its checksum.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
        let mut offset = 12 + header_len;
        let mut members = Vec::with_capacity(header.members.len());
        for mh in header.members {
            let mut net = Network::build(&mh.spec, mh.class_count, mh.seed)?;
            if net.param_len() != mh.param_len {
                return Err(Error::format(path, "parameter length disagrees with spec"));
            }
            let end = offset + 4 * mh.param_len;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| Error::format(path, "truncated parameters"))?;
            let params = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            net.set_params(params)?;
            for name in &mh.frozen {
                net.freeze(name);
            }
            members.push(net);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::format(path, "trailing bytes after parameters"));
        }
        Ok(Checkpoint {
            role: header.role,
            fingerprint: header.fingerprint,
            members,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks that members match the expected specs and class count.
    pub fn load_expecting(path: &Path, expected: &[BackboneSpec], class_count: usize) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_matches(expected, class_count)?;
        Ok(ckpt)
    }

    pub fn check_matches(&self, expected: &[BackboneSpec], class_count: usize) -> Result<()> {
        if self.members.len() != expected.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} member(s), checkpoint has {}",
                expected.len(),
                self.members.len()
            )));
        }
        for (m, spec) in self.members.iter().zip(expected) {
            if m.spec() != spec {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint member `{}` does not match expected backbone `{}`",
                    m.spec().name,
                    spec.name
                )));
            }
            if m.class_count() != class_count {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint has {} classes, config has {class_count}",
                    m.class_count()
                )));
            }
        }
        Ok(())
    }
}
