//! Single-file archive of named f32 tensors plus a JSON manifest.
//!
//! Layout: 8-byte magic, u64 LE manifest length, manifest JSON, then each
//! tensor's little-endian data in name order. The manifest lists names and
//! shapes, so equal contents always serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gantruth_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::hex;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GTRUTHC1";

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: Value,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Archive {
    pub manifest: Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn new(manifest: Value) -> Self {
        Archive { manifest, tensors: BTreeMap::new() }
    }

    /// Add every parameter of `store` under `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrite every parameter of `store` from tensors under `prefix`. The
    /// archive must hold exactly the store's parameters with equal shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let expected = store.len();
        let present = self.tensors.keys().filter(|k| k.starts_with(prefix)).count();
        if present != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {present} tensors under '{prefix}', model expects {expected}"
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{key}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            manifest: self.manifest.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.tensors.values().map(|t| 4 * t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated manifest"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let mut offset = 16 + hlen;
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let chunk = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            tensors.insert(name, Tensor::from_le_bytes(shape, chunk)?);
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Archive { manifest: header.manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write then rename, so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Deserialize one manifest field.
    pub fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks '{key}'")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("manifest field '{key}': {e}")))
    }
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
