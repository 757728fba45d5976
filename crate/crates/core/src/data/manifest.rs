//! CSV manifest ingestion.
//!
//! Grammar: a header row containing `sample_id`, `image_path` and one column
//! per configured class name (any order, matched by name, no other columns),
//! followed by one row per sample. Label cells are `1`, `0`, `-1` or empty
//! (`1.0`, `0.0` and `-1.0` are accepted as spellings of the same values).
//! Relative image paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw manifest label before any uncertainty policy is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RawLabel {
    Positive,
    Negative,
    Uncertain,
    Blank,
}

impl RawLabel {
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim() {
            "1" | "1.0" => Some(RawLabel::Positive),
            "0" | "0.0" => Some(RawLabel::Negative),
            "-1" | "-1.0" => Some(RawLabel::Uncertain),
            "" => Some(RawLabel::Blank),
            _ => None,
        }
    }

    pub fn as_token(self) -> &'static str {
        match self {
            RawLabel::Positive => "1",
            RawLabel::Negative => "0",
            RawLabel::Uncertain => "-1",
            RawLabel::Blank => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifestRow {
    pub sample_id: String,
    pub image_path: PathBuf,
    /// One entry per configured class, in class-index order.
    pub raw_labels: Vec<RawLabel>,
}

fn manifest_err(row: usize, column: Option<&str>, message: impl Into<String>) -> Error {
    Error::Manifest {
        row,
        column: column.map(str::to_string),
        message: message.into(),
    }
}

/// Parses a manifest file. Rows are numbered from 1 (first data row).
pub fn parse_manifest(path: &Path, class_names: &[String]) -> Result<Vec<SampleManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest_str(&text, class_names, base)
}

/// Parses manifest text; relative image paths are joined onto `base`.
pub fn parse_manifest_str(text: &str, class_names: &[String], base: &Path) -> Result<Vec<SampleManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| manifest_err(0, None, e.to_string()))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_col = find("sample_id").ok_or_else(|| manifest_err(0, Some("sample_id"), "missing column"))?;
    let path_col = find("image_path").ok_or_else(|| manifest_err(0, Some("image_path"), "missing column"))?;
    let class_cols: Vec<usize> = class_names
        .iter()
        .map(|n| find(n).ok_or_else(|| manifest_err(0, Some(n), "missing class column")))
        .collect::<Result<_>>()?;
    if headers.len() != class_names.len() + 2 {
        let known: HashSet<&str> = class_names
            .iter()
            .map(String::as_str)
            .chain(["sample_id", "image_path"])
            .collect();
        let extra = headers.iter().find(|h| !known.contains(h)).unwrap_or("?");
        return Err(manifest_err(0, Some(extra), "unexpected column"));
    }

    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| manifest_err(row, None, e.to_string()))?;
        let sample_id = record.get(id_col).unwrap_or("").to_string();
        if sample_id.is_empty() {
            return Err(manifest_err(row, Some("sample_id"), "empty sample id"));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(manifest_err(
                row,
                Some("sample_id"),
                format!("duplicate sample id `{sample_id}`"),
            ));
        }
        let image = record.get(path_col).unwrap_or("");
        if image.is_empty() {
            return Err(manifest_err(row, Some("image_path"), "missing image path"));
        }
        let image_path = {
            let p = Path::new(image);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let raw_labels = class_cols
            .iter()
            .zip(class_names)
            .map(|(&col, name)| {
                let token = record.get(col).unwrap_or("");
                RawLabel::parse(token).ok_or_else(|| manifest_err(row, Some(name), format!("invalid label `{token}`")))
            })
            .collect::<Result<_>>()?;
        rows.push(SampleManifestRow {
            sample_id,
            image_path,
            raw_labels,
        });
    }
    Ok(rows)
}

/// Writes rows back out in the canonical column order.
pub fn write_manifest(path: &Path, class_names: &[String], rows: &[SampleManifestRow], base: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["sample_id".to_string(), "image_path".to_string()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        let rel = r.image_path.strip_prefix(base).unwrap_or(&r.image_path);
        let mut rec = vec![r.sample_id.clone(), rel.to_string_lossy().into_owned()];
        rec.extend(r.raw_labels.iter().map(|l| l.as_token().to_string()));
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
