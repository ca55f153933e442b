//! On-disk tensor bundles: `manifest.json` plus `tensors.bin`.
//!
//! `tensors.bin` holds little-endian IEEE-754 `f64` values, row-major, one
//! tensor after another in manifest order. Each manifest entry records its
//! byte offset, so a reader can validate the layout before touching data.
//! Corpus embeddings, model checkpoints and similarity matrices all use this
//! layout and differ only in the entry `role`.

use std::fs;
use std::path::Path;

use hnf_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Caption,
    Video,
    Param,
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    /// Caption length.
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Frame count.
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Patches per frame, excluding the frame-CLS slot.
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "D_raw")]
    pub d_raw: usize,
    pub entries: Vec<ManifestEntry>,
}

/// A tensor waiting to be written; offsets are assigned by [`write`].
pub struct Pending<'a> {
    pub id: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub data: &'a [f64],
}

impl<'a> Pending<'a> {
    pub fn new(id: impl Into<String>, role: Role, shape: Vec<usize>, data: &'a [f64]) -> Self {
        Self {
            id: id.into(),
            role,
            shape,
            m: None,
            n: None,
            k: None,
            data,
        }
    }
}

pub fn write(dir: &Path, d_raw: usize, tensors: &[Pending<'_>]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::bundle(
                &t.id,
                format!("shape {:?} needs {numel} values, got {}", t.shape, t.data.len()),
            ));
        }
        if let Some(bad) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::bundle(&t.id, format!("non-finite value at flat index {bad}")));
        }
        entries.push(ManifestEntry {
            id: t.id.clone(),
            role: t.role,
            shape: t.shape.clone(),
            byte_offset: bytes.len() as u64,
            m: t.m,
            n: t.n,
            k: t.k,
        });
        for v in t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        d_raw,
        entries,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let tensors_path = dir.join(TENSORS_FILE);
    fs::write(&tensors_path, bytes).map_err(|e| Error::io(&tensors_path, e))?;
    Ok(manifest)
}

/// Reads and validates a bundle. Returns the manifest and one flat buffer per entry.
pub fn read(dir: &Path) -> Result<(Manifest, Vec<Vec<f64>>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::bundle(
            MANIFEST_FILE,
            format!("unsupported version {}", manifest.version),
        ));
    }
    let tensors_path = dir.join(TENSORS_FILE);
    let bytes = fs::read(&tensors_path).map_err(|e| Error::io(&tensors_path, e))?;

    let mut out = Vec::with_capacity(manifest.entries.len());
    let mut expected_offset = 0u64;
    for entry in &manifest.entries {
        validate_entry(entry, manifest.d_raw)?;
        if entry.byte_offset != expected_offset {
            return Err(Error::bundle(
                &entry.id,
                format!(
                    "byte_offset {} does not follow the previous tensor (expected {expected_offset})",
                    entry.byte_offset
                ),
            ));
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.numel() * 8;
        if end > bytes.len() {
            return Err(Error::bundle(
                &entry.id,
                format!("payload truncated: needs bytes {start}..{end}, file has {}", bytes.len()),
            ));
        }
        let data: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::bundle(&entry.id, format!("non-finite value at flat index {bad}")));
        }
        out.push(data);
        expected_offset = end as u64;
    }
    if expected_offset as usize != bytes.len() {
        return Err(Error::bundle(
            TENSORS_FILE,
            format!("{} trailing bytes after the last tensor", bytes.len() - expected_offset as usize),
        ));
    }
    Ok((manifest, out))
}

/// Writes a single `captions × videos` similarity matrix.
pub fn write_matrix(dir: &Path, id: &str, m: &Tensor) -> Result<()> {
    write(dir, m.cols(), &[Pending::new(id, Role::Matrix, vec![m.rows(), m.cols()], m.data())])?;
    Ok(())
}

/// Reads a bundle holding exactly one matrix entry.
pub fn read_matrix(dir: &Path) -> Result<Tensor> {
    let (manifest, mut data) = read(dir)?;
    match (manifest.entries.as_slice(), data.pop()) {
        ([entry], Some(values)) if entry.role == Role::Matrix => {
            let (rows, cols) = match entry.shape[..] {
                [r, c] => (r, c),
                [c] => (1, c),
                _ => unreachable!("rank checked on read"),
            };
            Ok(Tensor::new(rows, cols, values)?)
        }
        _ => Err(Error::bundle(
            MANIFEST_FILE,
            format!("expected one matrix entry, found {} entries", manifest.entries.len()),
        )),
    }
}

fn validate_entry(entry: &ManifestEntry, d_raw: usize) -> Result<()> {
    let fail = |reason: String| Err(Error::bundle(&entry.id, reason));
    match entry.role {
        Role::Caption => {
            let [m, d] = entry.shape[..] else {
                return fail(format!("caption shape must be [M, D_raw], got {:?}", entry.shape));
            };
            if d != d_raw {
                return fail(format!("rows have {d} values but manifest D_raw is {d_raw}"));
            }
            if m == 0 {
                return fail("caption has no tokens".into());
            }
            if entry.m.is_some_and(|declared| declared != m) {
                return fail(format!("declared M={:?} but shape has {m} rows", entry.m));
            }
        }
        Role::Video => {
            let [n, slots, d] = entry.shape[..] else {
                return fail(format!("video shape must be [N, K+1, D_raw], got {:?}", entry.shape));
            };
            if d != d_raw {
                return fail(format!("rows have {d} values but manifest D_raw is {d_raw}"));
            }
            if n == 0 || slots == 0 {
                return fail("video needs at least one frame and one slot".into());
            }
            if entry.n.is_some_and(|declared| declared != n) {
                return fail(format!("declared N={:?} but shape has {n} frames", entry.n));
            }
            if entry.k.is_some_and(|declared| declared + 1 != slots) {
                return fail(format!("declared K={:?} but shape has {slots} slots", entry.k));
            }
        }
        Role::Param | Role::Matrix => {
            if entry.shape.is_empty() || entry.shape.len() > 2 {
                return fail(format!("expected rank 1 or 2, got {:?}", entry.shape));
            }
        }
    }
    Ok(())
}
