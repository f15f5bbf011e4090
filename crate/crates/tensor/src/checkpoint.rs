//! Named-parameter container and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DNLCKPT\0"
//! version    u32      currently 1
//! count      u32      number of entries
//! entry*     name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!            values f64 × product(dims), row-major
//! ```
//!
//! Entries are written in lexicographic name order, so saving the same
//! parameters always produces identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::TensorError;
use crate::shape::numel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DNLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.insert(name.into(), (t.shape().to_vec(), t.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries.get(name).map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True if any entry name starts with `prefix`.
    pub fn has_namespace(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    /// Copies the stored values into `t`, checking the shape.
    pub fn load_into(&self, name: &str, t: &Tensor) -> Result<(), TensorError> {
        let (shape, values) = self.entries.get(name).ok_or_else(|| TensorError::Format {
            path: Default::default(),
            message: format!("missing entry {name}"),
        })?;
        if shape.as_slice() != t.shape() {
            return Err(TensorError::Shape {
                context: format!("checkpoint entry {name}"),
                expected: t.shape().to_vec(),
                got: shape.clone(),
            });
        }
        t.update_data(|d| d.copy_from_slice(values));
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, (shape, values)) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, String> {
        fn u32_of(r: &mut impl Read) -> Result<u32, String> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = u32_of(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = u32_of(&mut r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = u32_of(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| e.to_string())?;
            let name = String::from_utf8(name).map_err(|e| e.to_string())?;
            let rank = u32_of(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| e.to_string())?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = numel(&shape);
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|e| e.to_string())?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.insert(name, (shape, values));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let io = |source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(file)).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let file = File::open(path).map_err(|source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(BufReader::new(file)).map_err(|message| TensorError::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut ck = Checkpoint::new();
        ck.insert("net.w", &Tensor::constant(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, 7.0]));
        ck.insert("net.b", &Tensor::scalar(-0.0));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(ck, back);
        assert_eq!(back.get("net.b").unwrap().1[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_shape() {
        assert!(Checkpoint::read_from(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::zeros(&[2, 2]));
        let t = Tensor::zeros(&[4]);
        assert!(matches!(ck.load_into("w", &t), Err(TensorError::Shape { .. })));
    }
}
