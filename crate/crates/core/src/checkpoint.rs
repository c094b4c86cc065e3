//! Binary checkpoint container shared by every learned model.
//!
//! Layout: `u64` little-endian header length, the JSON header, then the
//! contiguous little-endian `f32` payload. Offsets in the header are byte
//! offsets into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ebmdmo_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "ebmdmo-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// Model family, e.g. `"ebm"`.
    pub kind: String,
    /// Variant and hyperparameters needed to rebuild the architecture.
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn to_bytes(kind: &str, meta: serde_json::Value, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::with_capacity(params.num_elements() * 4);
    for (name, t) in params.iter() {
        tensors.insert(
            name.to_string(),
            TensorEntry { dtype: "f32".into(), shape: t.shape().to_vec(), offset: payload.len() },
        );
        payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let header = Header { format: MAGIC.into(), version: VERSION, kind: kind.into(), meta, tensors };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(payload);
    Ok(out)
}

pub fn save(path: &Path, kind: &str, meta: serde_json::Value, params: &ParamStore<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, to_bytes(kind, meta, params)?)?;
    Ok(())
}

/// Parsed container: header plus name-addressed tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file shorter than the length prefix"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[8..];
        if hlen > body.len() {
            return Err(bad("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format != MAGIC || header.version != VERSION {
            return Err(bad("unrecognized format or version"));
        }
        let payload = &body[hlen..];
        let mut tensors = BTreeMap::new();
        for (name, e) in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("{name}: payload truncated")));
            }
            let data = payload[e.offset..end]
                .chunks(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name.clone(), Tensor::from_vec(&e.shape, data));
        }
        Ok(Self { header, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("{} not found", path.display())));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.header.kind)))
        }
    }

    pub fn meta<M: for<'de> Deserialize<'de>>(&self) -> Result<M> {
        Ok(serde_json::from_value(self.header.meta.clone())?)
    }

    /// Overwrites every parameter of a freshly built `store` by name; shapes
    /// and the name sets must match exactly.
    pub fn fill<T: ebmdmo_autograd::Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters, checkpoint has {}",
                store.len(),
                self.tensors.len()
            )));
        }
        for k in 0..store.len() {
            let id = ebmdmo_autograd::ParamId(k);
            let name = store.name(id).to_string();
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
            *store.get_mut(id) = t.cast();
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
