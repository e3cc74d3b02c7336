//! Binary checkpoint container shared by every trained model.
//!
//! Layout: magic bytes `ASIG`, one format-version byte, a 4-byte
//! little-endian JSON header length, the JSON header, then the raw
//! little-endian 64-bit float payload of every tensor in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"ASIG";
const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// A checkpoint in memory: a kind tag, JSON metadata (layer list, shapes,
/// hyperparameters, training seed) and named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(
        kind: impl Into<String>,
        meta: serde_json::Value,
        params: &ParamStore,
    ) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: params.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
        }
    }

    pub fn params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.insert(name.clone(), t.clone())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorInfo { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&[VERSION])?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, t) in &self.tensors {
            for v in t.values() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            Error::format(format!("cannot open checkpoint {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let mut version = [0u8; 1];
        f.read_exact(&mut version)?;
        if version[0] != VERSION {
            return Err(Error::format(format!(
                "{}: unsupported version {}",
                path.display(),
                version[0]
            )));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::format(format!("{}: bad header: {e}", path.display())))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            let mut values = vec![0.0f64; n];
            for v in &mut values {
                let mut b = [0u8; 8];
                f.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            tensors.push((info.name, Tensor::new(info.shape, values)?));
        }
        Ok(Checkpoint { kind: header.kind, meta: header.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params = ParamStore::new();
        params
            .insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3e-9, 0.0, 5.0, -6.0]).unwrap())
            .unwrap();
        params.insert("a.b", Tensor::from_vec(vec![0.125, -0.25])).unwrap();
        let ckpt = Checkpoint::from_params(
            "victim",
            serde_json::json!({"seed": 42, "classes": ["x", "y"]}),
            &params,
        );
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind, "victim");
        assert_eq!(loaded.meta["seed"], 42);
        assert_eq!(loaded.params().unwrap(), params);
    }

    #[test]
    fn magic_and_version_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn file_starts_with_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::from_params("plda", serde_json::json!({}), &ParamStore::new());
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"ASIG");
        assert_eq!(bytes[4], 1);
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert!(serde_json::from_slice::<serde_json::Value>(&bytes[9..9 + hlen]).is_ok());
    }
}
