//! Flat binary container of named f64 tensors plus a JSON metadata block.
//! Used for model checkpoints (parameters, batch-norm buffers, optimizer
//! velocities) and for persisted embedding stores.
//!
//! Layout: magic `SVCK`, u32 version, u32 metadata length + JSON bytes,
//! u32 tensor count, then per tensor: u16 name length + UTF-8 name,
//! u8 dtype (0 = f64), u8 rank, u64 dims, little-endian f64 data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::grad::Tensor;

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Error, Debug)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container format error: {0}")]
    Format(String),
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Named tensors with a JSON metadata block. The map is ordered so writes
/// are deterministic.
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self) -> Result<T, CkptError> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn write(&self, path: &Path) -> Result<(), CkptError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(CkptError::Format(format!("tensor name too long: {name}")));
            }
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[DTYPE_F64, t.ndim() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CkptError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CkptError::Format(format!(
                "{}: bad container magic",
                path.display()
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(CkptError::Format(format!(
                "unsupported container version {version}"
            )));
        }
        r.read_exact(&mut b4)?;
        let meta_len = u32::from_le_bytes(b4) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut tensors = BTreeMap::new();
        let mut b2 = [0u8; 2];
        let mut b8 = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut b2)?;
            let name_len = u16::from_le_bytes(b2) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CkptError::Format("tensor name is not UTF-8".into()))?;
            let mut b1 = [0u8; 2];
            r.read_exact(&mut b1)?;
            if b1[0] != DTYPE_F64 {
                return Err(CkptError::Format(format!(
                    "tensor {name}: unsupported dtype {}",
                    b1[0]
                )));
            }
            let rank = b1[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b8)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            let tensor = Tensor::from_vec(&shape, data)
                .map_err(|e| CkptError::Format(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(CkptError::Format(format!("duplicate tensor name {name}")));
            }
        }
        Ok(Container { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn container_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut c = Container::new(json!({"stage": 1, "iteration": 42}));
        c.tensors.insert(
            "model.stem.conv.weight".into(),
            Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| i as f64 * 0.1).collect()).unwrap(),
        );
        c.tensors
            .insert("scalar".into(), Tensor::scalar(-3.25));
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(
            back.tensors["model.stem.conv.weight"],
            c.tensors["model.stem.conv.weight"]
        );
        assert_eq!(back.tensors["scalar"], c.tensors["scalar"]);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            Container::read(&path),
            Err(CkptError::Format(_)) | Err(CkptError::Io(_))
        ));
    }

    #[test]
    fn writes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut c = Container::new(json!({"k": "v"}));
        c.tensors
            .insert("z".into(), Tensor::filled(&[4], 1.5));
        c.tensors
            .insert("a".into(), Tensor::filled(&[2], -0.5));
        c.write(&p1).unwrap();
        c.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
