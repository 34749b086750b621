//! Named parameter sets, their elementwise algebra, and the single-file
//! container format.
//!
//! A container is a one-line UTF-8 JSON manifest, a `\n`, then the raw
//! little-endian `f32` payload. Entries are laid out back to back in name order
//! and the manifest carries an FNV-1a 64-bit checksum of the payload bytes.
//! Extra manifest keys (task-vector fingerprint, model spec, ...) ride along as
//! extension fields.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rng::fnv1a64;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("payload checksum mismatch: manifest says {expected:#018x}, payload hashes to {actual:#018x}")]
    ChecksumMismatch { expected: u64, actual: u64 },
    #[error("shape mismatch for entry {name:?}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("empty entry name")]
    EmptyName,
    #[error("parameter sets are not compatible: {0}")]
    Incompatible(String),
    #[error("unsupported container format version {0}")]
    UnsupportedVersion(u32),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(StoreError::ShapeMismatch {
                name: String::new(),
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        if expected != data.len() {
            return Err(StoreError::ShapeMismatch {
                name: String::new(),
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// An immutable, name-ordered collection of tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    /// Builds a set from `(name, shape, data)` triples, rejecting empty or
    /// duplicate names and shape/length disagreements.
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>,
    {
        let mut map = BTreeMap::new();
        for (name, shape, data) in entries {
            if name.is_empty() {
                return Err(StoreError::EmptyName);
            }
            let tensor = Tensor::new(shape, data).map_err(|e| match e {
                StoreError::ShapeMismatch { detail, .. } => StoreError::ShapeMismatch {
                    name: name.clone(),
                    detail,
                },
                other => other,
            })?;
            if map.insert(name.clone(), tensor).is_some() {
                return Err(StoreError::DuplicateName(name));
            }
        }
        Ok(Self { entries: map })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        if tensors.keys().any(|k| k.is_empty()) {
            return Err(StoreError::EmptyName);
        }
        Ok(Self { entries: tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.entries.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Rebuilds a set shaped like `self` from a flat vector in name order.
    pub fn with_flat(&self, flat: &[f32]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(StoreError::Incompatible(format!(
                "flat vector has {} values, parameter set has {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.entries {
            let n = t.len();
            entries.insert(
                name.clone(),
                Tensor {
                    shape: t.shape.clone(),
                    data: flat[offset..offset + n].to_vec(),
                },
            );
            offset += n;
        }
        Ok(Self { entries })
    }

    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
            .collect();
        Self { entries }
    }

    /// Checks that both sets have the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || !self.entries.keys().eq(other.entries.keys())
        {
            let a: Vec<_> = self.names().collect();
            let b: Vec<_> = other.names().collect();
            return Err(StoreError::Incompatible(format!(
                "name sets differ: {a:?} vs {b:?}"
            )));
        }
        for (name, t) in &self.entries {
            let o = &other.entries[name];
            if t.shape != o.shape {
                return Err(StoreError::ShapeMismatch {
                    name: name.clone(),
                    detail: format!("{:?} vs {:?}", t.shape, o.shape),
                });
            }
        }
        Ok(())
    }

    /// Bitwise equality over names, shapes and values.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bits_eq(b))
    }

    /// Largest absolute elementwise difference. Sets must be compatible.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_compatible(other)?;
        let mut worst = 0.0f64;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((f64::from(*x) - f64::from(*y)).abs());
            }
        }
        Ok(worst)
    }

    /// The serialized payload: every entry's values as little-endian bytes,
    /// in name order.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for t in self.entries.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// FNV-1a 64 of [`ParamSet::payload_bytes`]; equals the container's
    /// `payload_checksum`.
    pub fn checksum(&self) -> u64 {
        fnv1a64(&self.payload_bytes())
    }

    /// Applies `f` to every (self, other) pair of values, computing in `f64`
    /// and rounding once to `f32`.
    pub fn zip_map<F>(&self, other: &ParamSet, f: F) -> Result<ParamSet>
    where
        F: Fn(f64, f64) -> f64,
    {
        self.check_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((name, a), b)| {
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| f(f64::from(x), f64::from(y)) as f32)
                    .collect();
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn map<F>(&self, f: F) -> ParamSet
    where
        F: Fn(f64) -> f64,
    {
        let entries = self
            .entries
            .iter()
            .map(|(name, a)| {
                let data = a.data.iter().map(|&x| f(f64::from(x)) as f32).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        ParamSet { entries }
    }
}

/// Returns `a * x + y`. Inputs are untouched.
pub fn axpy(a: f64, x: &ParamSet, y: &ParamSet) -> Result<ParamSet> {
    x.zip_map(y, |xv, yv| a * xv + yv)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
    pub payload_checksum: u64,
    /// Extension fields, serialized after the core keys.
    #[serde(flatten)]
    pub extensions: Map<String, Value>,
}

impl ParamManifest {
    pub fn describe(ps: &ParamSet, extensions: Map<String, Value>) -> Self {
        let mut offset = 0u64;
        let entries = ps
            .iter()
            .map(|(name, t)| {
                let len = (t.len() * 4) as u64;
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    byte_offset: offset,
                    byte_length: len,
                };
                offset += len;
                e
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            entries,
            payload_checksum: ps.checksum(),
            extensions,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes a container into memory.
pub fn encode(ps: &ParamSet, extensions: Map<String, Value>) -> Vec<u8> {
    let manifest = ParamManifest::describe(ps, extensions);
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&ps.payload_bytes());
    out
}

pub fn save(ps: &ParamSet, path: &Path) -> Result<()> {
    save_with(ps, Map::new(), path)
}

/// Writes `ps` with extra manifest fields.
pub fn save_with(ps: &ParamSet, extensions: Map<String, Value>, path: &Path) -> Result<()> {
    let bytes = encode(ps, extensions);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    load_with(path).map(|(ps, _)| ps)
}

/// Reads a container, returning the set and the manifest's extension fields.
pub fn load_with(path: &Path) -> Result<(ParamSet, Map<String, Value>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

/// Parses an in-memory container.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, Map<String, Value>)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| StoreError::CorruptManifest("missing manifest terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|e| StoreError::CorruptManifest(format!("manifest is not UTF-8: {e}")))?;
    let manifest: ParamManifest = serde_json::from_str(header)
        .map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(manifest.format_version));
    }
    let payload = &bytes[newline + 1..];
    let actual = fnv1a64(payload);
    if actual != manifest.payload_checksum {
        return Err(StoreError::ChecksumMismatch {
            expected: manifest.payload_checksum,
            actual,
        });
    }

    let mut prev_end = 0u64;
    let mut entries = BTreeMap::new();
    for e in &manifest.entries {
        if e.name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        let count: usize = e.shape.iter().product();
        if e.shape.contains(&0) || (count as u64) * 4 != e.byte_length {
            return Err(StoreError::ShapeMismatch {
                name: e.name.clone(),
                detail: format!(
                    "shape {:?} needs {} bytes, manifest records {}",
                    e.shape,
                    count * 4,
                    e.byte_length
                ),
            });
        }
        if e.byte_offset < prev_end {
            return Err(StoreError::CorruptManifest(format!(
                "entry {:?} overlaps the previous entry",
                e.name
            )));
        }
        let end = e.byte_offset + e.byte_length;
        if end > payload.len() as u64 {
            return Err(StoreError::CorruptManifest(format!(
                "entry {:?} extends past the payload",
                e.name
            )));
        }
        prev_end = end;
        let data = payload[e.byte_offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor {
            shape: e.shape.clone(),
            data,
        };
        if entries.insert(e.name.clone(), tensor).is_some() {
            return Err(StoreError::DuplicateName(e.name.clone()));
        }
    }
    Ok((ParamSet { entries }, manifest.extensions))
}
