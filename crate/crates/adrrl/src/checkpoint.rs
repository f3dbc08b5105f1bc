//! Binary checkpoint container: a sorted set of named f64 tensors.
//!
//! Layout: magic `ADRL`, format version (u32 LE), tensor count (u32 LE), then
//! for each tensor its name (u32 length + UTF-8 bytes), rank (u32), dims
//! (u32 each) and the payload as little-endian f64. Tensors are written in
//! name order, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"ADRL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing tensor: {0}")]
    Missing(String),
    #[error("tensor {name}: expected {expected} elements, got {got}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len() as u32],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            dims: vec![],
            data: vec![x],
        }
    }

    pub fn numel(&self) -> usize {
        // rank 0 is a scalar; the empty product is 1
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Named tensor store. Integers ride along as bit-cast f64 scalars.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert_eq!(
            tensor.numel(),
            tensor.data.len(),
            "tensor {name}: dims do not match payload"
        );
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn insert_vec(&mut self, name: &str, data: Vec<f64>) {
        self.insert(name, Tensor::vector(data));
    }

    pub fn insert_scalar(&mut self, name: &str, x: f64) {
        self.insert(name, Tensor::scalar(x));
    }

    pub fn insert_u64(&mut self, name: &str, x: u64) {
        self.insert_scalar(name, f64::from_bits(x));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        Ok(self.get(name)?.data.clone())
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        let t = self.get(name)?;
        if t.data.len() != 1 {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: 1,
                got: t.data.len(),
            });
        }
        Ok(t.data[0])
    }

    pub fn get_u64(&self, name: &str) -> Result<u64, CheckpointError> {
        Ok(self.get_scalar(name)?.to_bits())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 1 << 20 {
                return Err(CheckpointError::Corrupt("oversized tensor name".into()));
            }
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| CheckpointError::Corrupt("tensor name not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("rank {rank} too large")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r)?);
            }
            let numel = if dims.is_empty() {
                1
            } else {
                dims.iter().map(|&d| d as usize).product()
            };
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(name, Tensor { dims, data });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let data = std::fs::read(path)?;
        Self::read_from(data.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_vec("model.params", vec![1.0, -2.5, 3.25e-300, f64::MIN_POSITIVE]);
        c.insert_scalar("iteration", 42.0);
        c.insert_u64("seed", 0xDEAD_BEEF_CAFE_F00D);
        c.insert(
            "weights",
            Tensor {
                dims: vec![2, 3],
                data: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            },
        );
        c
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_u64("seed").unwrap(), 0xDEAD_BEEF_CAFE_F00D);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let mut a = Vec::new();
        c.write_to(&mut a).unwrap();
        let back = Checkpoint::read_from(a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn special_float_bit_patterns_survive() {
        let mut c = Checkpoint::new();
        c.insert_vec(
            "x",
            vec![0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::EPSILON],
        );
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        let x = back.get_vec("x").unwrap();
        assert_eq!(x[0].to_bits(), 0.0_f64.to_bits());
        assert_eq!(x[1].to_bits(), (-0.0_f64).to_bits());
        assert_eq!(x[2], f64::INFINITY);
        assert_eq!(x[3], f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOPE\x01\x00\x00\x00"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[4] = 99;
        assert!(matches!(
            Checkpoint::read_from(buf.as_slice()),
            Err(CheckpointError::BadVersion(99))
        ));
        // truncated payload
        let mut buf2 = Vec::new();
        sample().write_to(&mut buf2).unwrap();
        buf2.truncate(buf2.len() - 3);
        assert!(Checkpoint::read_from(buf2.as_slice()).is_err());
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let c = sample();
        assert!(matches!(
            c.get("nonexistent"),
            Err(CheckpointError::Missing(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.adrl");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}
