//! Versioned tensor container.
//!
//! Layout: the 8-byte magic `SURFCKPT`, a little-endian `u32` format version,
//! a `u64` manifest length, the JSON manifest, then every tensor as
//! little-endian `f64` values at the element offset recorded in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surfgan_grad::{AdamState, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SURFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the file holds, e.g. `surf-gan` or `injection`.
    pub kind: String,
    pub config_hash: String,
    /// Sizes, counters and anything else needed to rebuild the owners.
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_all(&mut self, prefix: &str, tensors: Vec<(String, Tensor)>) {
        for (name, t) in tensors {
            self.tensors.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_adam(&mut self, prefix: &str, state: &AdamState) {
        self.tensors
            .insert(format!("{prefix}step"), Tensor::scalar(state.step as f64));
        for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
            self.tensors.insert(format!("{prefix}m.{i}"), m.clone());
            self.tensors.insert(format!("{prefix}v.{i}"), v.clone());
        }
    }

    pub fn adam(&self, prefix: &str) -> Result<AdamState> {
        let step = self
            .tensors
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer `{prefix}`")))?
            .item() as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        while let (Some(a), Some(b)) = (
            self.tensors.get(&format!("{prefix}m.{}", m.len())),
            self.tensors.get(&format!("{prefix}v.{}", v.len())),
        ) {
            m.push(a.clone());
            v.push(b.clone());
        }
        Ok(AdamState { step, m, v })
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("holds `{}`, expected `{kind}`", self.kind),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json_end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..json_end])
            .map_err(|e| fail(format!("manifest: {e}")))?;
        let blob = &bytes[json_end..];
        if blob.len() % 8 != 0 {
            return Err(fail("tensor blob is not a whole number of f64 values".into()));
        }
        let total = blob.len() / 8;
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset.checked_add(n).is_none_or(|end| end > total) {
                return Err(fail(format!("tensor `{}` runs past the end of the file", e.name)));
            }
            let data = blob[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)).is_some() {
                return Err(fail(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Self {
            kind: manifest.kind,
            config_hash: manifest.config_hash,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = tmp_path(path);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Data(format!("checkpoint meta lacks `{key}`")))
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", "abc", json!({"k": 6}));
        c.tensors.insert("a".into(), Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE]));
        c.tensors.insert("b".into(), Tensor::scalar(7.0));
        c
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_usize("k").unwrap(), 6);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn adam_state_roundtrip() {
        let state = AdamState {
            step: 3,
            m: vec![Tensor::ones(&[2])],
            v: vec![Tensor::full(&[2], 0.5)],
        };
        let mut c = Checkpoint::new("t", "", json!({}));
        c.insert_adam("opt.", &state);
        assert_eq!(c.adam("opt.").unwrap(), state);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/c.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
    }
}
