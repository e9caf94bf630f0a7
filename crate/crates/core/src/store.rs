//! `SKB1` tensor bundle container.
//!
//! Layout: 4-byte magic `SKB1`, little-endian `u32` manifest length `L`,
//! `L` bytes of UTF-8 JSON manifest, then the payload. Every tensor is
//! stored row-major and little-endian at `offset` bytes into the payload,
//! with an 8-byte stride for `f64` and 4 bytes for `f32`. Tensors are read
//! back widened to `f64`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const BUNDLE_MAGIC: [u8; 4] = *b"SKB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn stride(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: DType,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// A named collection of tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    tensors: Vec<(Matrix, DType)>,
    metadata: BTreeMap<String, String>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = Matrix>) -> Self {
        let mut b = Bundle::new();
        for t in tensors {
            b.push(t);
        }
        b
    }

    pub fn push(&mut self, m: Matrix) {
        self.tensors.push((m, DType::F64));
    }

    /// Stores `m` narrowed to `f32` on disk.
    pub fn push_f32(&mut self, m: Matrix) {
        self.tensors.push((m, DType::F32));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.tensors.iter().map(|(m, _)| m)
    }

    pub fn into_tensors(self) -> Vec<Matrix> {
        self.tensors.into_iter().map(|(m, _)| m).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors().find(|m| m.name() == Some(name))
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("bundle has no tensor named `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut names = HashSet::new();
        let mut offset = 0usize;
        for (idx, (m, dtype)) in self.tensors.iter().enumerate() {
            m.ensure_finite()?;
            if *dtype == DType::F32 && m.as_slice().iter().any(|&v| !(v as f32).is_finite()) {
                return Err(Error::NonFinite(format!(
                    "tensor {idx} overflows f32 storage"
                )));
            }
            let name = m.name().map_or_else(|| format!("tensor.{idx}"), str::to_owned);
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            entries.push(ManifestEntry {
                name,
                rows: m.rows(),
                cols: m.cols(),
                dtype: *dtype,
                offset,
            });
            offset += m.as_slice().len() * dtype.stride();
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let manifest_len = u32::try_from(manifest.len())
            .map_err(|_| Error::Format("manifest exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(8 + manifest.len() + offset);
        out.extend_from_slice(&BUNDLE_MAGIC);
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for (m, dtype) in &self.tensors {
            match dtype {
                DType::F64 => m.as_slice().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => m
                    .as_slice()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Bundle> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{} bytes, no room for magic", bytes.len())));
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != BUNDLE_MAGIC {
            return Err(Error::BadMagic { expected: BUNDLE_MAGIC, found });
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated("missing manifest length".into()));
        }
        let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload_start = 8usize
            .checked_add(manifest_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "manifest declares {manifest_len} bytes, only {} available",
                    bytes.len() - 8
                ))
            })?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..payload_start])?;
        let payload = &bytes[payload_start..];

        let mut names = HashSet::new();
        let mut spans = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name `{}`", e.name)));
            }
            let size = e
                .rows
                .checked_mul(e.cols)
                .and_then(|c| c.checked_mul(e.dtype.stride()))
                .ok_or_else(|| Error::Format(format!("tensor `{}` size overflows", e.name)))?;
            let end = e
                .offset
                .checked_add(size)
                .ok_or_else(|| Error::Format(format!("tensor `{}` offset overflows", e.name)))?;
            if end > payload.len() {
                return Err(Error::Truncated(format!(
                    "tensor `{}` needs payload bytes {}..{end}, payload has {}",
                    e.name,
                    e.offset,
                    payload.len()
                )));
            }
            spans.push((e.offset, end));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format("overlapping tensor payloads".into()));
            }
        }
        let used = spans.last().map_or(0, |s| s.1);
        if used != payload.len() {
            return Err(Error::Format(format!(
                "manifest/payload size mismatch: manifest covers {used} bytes, payload has {}",
                payload.len()
            )));
        }

        let mut bundle = Bundle { tensors: Vec::new(), metadata: manifest.metadata };
        for e in manifest.tensors {
            let count = e.rows * e.cols;
            let raw = &payload[e.offset..e.offset + count * e.dtype.stride()];
            let data: Vec<f64> = match e.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let m = Matrix::new(e.rows, e.cols, data)?.with_name(e.name);
            m.ensure_finite()?;
            bundle.tensors.push((m, e.dtype));
        }
        Ok(bundle)
    }

    /// Encodes first, so nothing is written when validation fails.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Bundle> {
        Bundle::decode(&fs::read(path)?)
    }
}

/// Writes `tensors` as `f64` entries with no metadata.
pub fn write_bundle(path: impl AsRef<Path>, tensors: &[Matrix]) -> Result<()> {
    Bundle::from_tensors(tensors.iter().cloned()).save(path)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    Ok(Bundle::load(path)?.into_tensors())
}
