//! Record store: soft labels and aligned feature references for every
//! training sample, bound to the checkpoint that produced them.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic            4 bytes  "KDRS"
//! version          u32      1
//! class_count      u32
//! temperature      f64
//! mode             u8       0 = softmax, 1 = per-class sigmoid
//! producer_role    u8       0 = teacher, 1 = assistant, 2 = student
//! producer_sha256  32 bytes raw digest of the producing checkpoint file
//! tap_count        u32
//!   per tap: name_len u32, name bytes (UTF-8), channels u32, size u32, size u32
//! entry_count      u32
//!   per entry: entry_len u32 (bytes after this field),
//!              id_len u32, id bytes, class_count × f64 soft labels,
//!              per tap channels × size × size × f32 aligned features
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{Role, SoftLabelMode, SoftLabelVector};

const MAGIC: &[u8; 4] = b"KDRS";
pub const RECORD_STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapLayout {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TapLayout {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample's handoff from a producer network.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillRecord {
    pub sample_id: String,
    pub soft_labels: SoftLabelVector,
    /// Aligned references in the store's tap order.
    pub feature_refs: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordStore {
    pub class_count: usize,
    pub temperature: f64,
    pub mode: SoftLabelMode,
    pub producer_role: Role,
    /// Hex SHA-256 of the producing checkpoint file.
    pub producer_checksum: String,
    pub taps: Vec<TapLayout>,
    pub records: Vec<DistillRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "record store is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl RecordStore {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let digest = hex::decode(&self.producer_checksum)
            .ok()
            .filter(|d| d.len() == 32)
            .ok_or_else(|| Error::Parameter(format!("`{}` is not a SHA-256 digest", self.producer_checksum)))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, RECORD_STORE_VERSION as usize);
        put_u32(&mut out, self.class_count);
        out.extend_from_slice(&self.temperature.to_le_bytes());
        out.push(self.mode.code());
        out.push(self.producer_role.code());
        out.extend_from_slice(&digest);
        put_u32(&mut out, self.taps.len());
        for t in &self.taps {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.channels);
            put_u32(&mut out, t.height);
            put_u32(&mut out, t.width);
        }
        put_u32(&mut out, self.records.len());
        for r in &self.records {
            if r.soft_labels.len() != self.class_count {
                return Err(Error::dim(
                    format!("soft labels of `{}`", r.sample_id),
                    self.class_count,
                    r.soft_labels.len(),
                ));
            }
            if r.feature_refs.len() != self.taps.len() {
                return Err(Error::dim(
                    format!("feature refs of `{}`", r.sample_id),
                    self.taps.len(),
                    r.feature_refs.len(),
                ));
            }
            let mut entry = Vec::new();
            put_u32(&mut entry, r.sample_id.len());
            entry.extend_from_slice(r.sample_id.as_bytes());
            for v in r.soft_labels.values() {
                entry.extend_from_slice(&v.to_le_bytes());
            }
            for (f, t) in r.feature_refs.iter().zip(&self.taps) {
                if f.len() != t.len() {
                    return Err(Error::dim(
                        format!("tap `{}` of `{}`", t.name, r.sample_id),
                        t.len(),
                        f.len(),
                    ));
                }
                for v in f {
                    entry.extend_from_slice(&v.to_le_bytes());
                }
            }
            put_u32(&mut out, entry.len());
            out.extend_from_slice(&entry);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a record store"));
        }
        let version = r.u32()?;
        if version != RECORD_STORE_VERSION as usize {
            return Err(Error::format(
                path,
                format!("unsupported record store version {version}"),
            ));
        }
        let class_count = r.u32()?;
        let temperature = r.f64()?;
        let mode_code = r.u8()?;
        let mode = SoftLabelMode::from_code(mode_code)
            .ok_or_else(|| Error::format(path, format!("unknown soft-label mode {mode_code}")))?;
        let role_code = r.u8()?;
        let producer_role =
            Role::from_code(role_code).ok_or_else(|| Error::format(path, format!("unknown role {role_code}")))?;
        let producer_checksum = hex::encode(r.take(32)?);
        let tap_count = r.u32()?;
        let mut taps = Vec::with_capacity(tap_count);
        for _ in 0..tap_count {
            taps.push(TapLayout {
                name: r.string()?,
                channels: r.u32()?,
                height: r.u32()?,
                width: r.u32()?,
            });
        }
        let n = r.u32()?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let entry_len = r.u32()?;
            let start = r.pos;
            let sample_id = r.string()?;
            let soft = (0..class_count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let mut feature_refs = Vec::with_capacity(taps.len());
            for t in &taps {
                feature_refs.push((0..t.len()).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
            }
            if r.pos - start != entry_len {
                return Err(Error::format(
                    path,
                    format!("entry `{sample_id}` has inconsistent length"),
                ));
            }
            let soft_labels = SoftLabelVector::new(soft, temperature, mode)
                .map_err(|e| Error::format(path, format!("entry `{sample_id}`: {e}")))?;
            records.push(DistillRecord {
                sample_id,
                soft_labels,
                feature_refs,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last entry"));
        }
        Ok(RecordStore {
            class_count,
            temperature,
            mode,
            producer_role,
            producer_checksum,
            taps,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails unless the store was produced by the checkpoint with digest `checksum`.
    pub fn verify_producer(&self, checksum: &str) -> Result<()> {
        if !self.producer_checksum.eq_ignore_ascii_case(checksum) {
            return Err(Error::Checksum {
                expected: self.producer_checksum.clone(),
                found: checksum.to_string(),
            });
        }
        Ok(())
    }

    pub fn index(&self) -> HashMap<&str, &DistillRecord> {
        self.records.iter().map(|r| (r.sample_id.as_str(), r)).collect()
    }

    pub fn get(&self, sample_id: &str) -> Option<&DistillRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }
}
