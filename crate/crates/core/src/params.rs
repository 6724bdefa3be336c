//! Flat parameter vectors with a named shape manifest.
//!
//! A [`ParameterVector`] is the unit of exchange between contributors and the
//! repository: the shared body of a model is flattened into one `f64` array and
//! described by an ordered list of `(name, shape)` entries.
//!
//! Binary layout (`CFPV` v1):
//!
//! ```text
//! b"CFPV" | 0x01 | u32 LE manifest length | manifest JSON (UTF-8) | f64 LE values...
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"CFPV";
pub const PARAMS_VERSION: u8 = 0x01;

/// One named tensor inside a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered tensor layout of a [`ParameterVector`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest(Vec<TensorSpec>);

impl Manifest {
    pub fn new(entries: Vec<TensorSpec>) -> Self {
        Self(entries)
    }

    pub fn entries(&self) -> &[TensorSpec] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().map(TensorSpec::numel).sum()
    }

    /// Offset and length of each tensor within the flat array.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.0
            .iter()
            .map(|t| {
                let r = start..start + t.numel();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Flat, ordered model parameters plus their manifest.
#[derive(Clone, PartialEq)]
pub struct ParameterVector {
    manifest: Manifest,
    values: Vec<f64>,
}

impl fmt::Debug for ParameterVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParameterVector")
            .field("tensors", &self.manifest.0.len())
            .field("len", &self.values.len())
            .finish()
    }
}

impl ParameterVector {
    pub fn new(manifest: Manifest, values: Vec<f64>) -> Result<Self> {
        let expected = manifest.numel();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "manifest describes {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { manifest, values })
    }

    pub fn zeros(manifest: Manifest) -> Self {
        let n = manifest.numel();
        Self {
            manifest,
            values: vec![0.0; n],
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Two vectors can be fused iff their manifests are identical.
    pub fn is_fusable_with(&self, other: &ParameterVector) -> bool {
        self.manifest == other.manifest
    }

    /// Values of the named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let ranges = self.manifest.ranges();
        self.manifest
            .0
            .iter()
            .position(|t| t.name == name)
            .map(|i| &self.values[ranges[i].clone()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance to `other`; manifests must match.
    pub fn l2_distance(&self, other: &ParameterVector) -> Result<f64> {
        if !self.is_fusable_with(other) {
            return Err(Error::Shape("manifest mismatch".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(9 + manifest.len() + self.values.len() * 8);
        out.extend_from_slice(PARAMS_MAGIC);
        out.push(PARAMS_VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let codec = |msg: &str| Error::Codec(format!("CFPV: {msg}"));
        if bytes.len() < 9 {
            return Err(codec("truncated header"));
        }
        if &bytes[..4] != PARAMS_MAGIC {
            return Err(codec("bad magic"));
        }
        if bytes[4] != PARAMS_VERSION {
            return Err(codec(&format!("unsupported version {}", bytes[4])));
        }
        let mlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = &bytes[9..];
        if body.len() < mlen {
            return Err(codec("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| codec(&format!("manifest json: {e}")))?;
        let raw = &body[mlen..];
        let n = manifest.numel();
        if raw.len() != n * 8 {
            return Err(codec(&format!(
                "expected {} value bytes, got {}",
                n * 8,
                raw.len()
            )));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { manifest, values })
    }

    /// SHA-256 of the binary encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
