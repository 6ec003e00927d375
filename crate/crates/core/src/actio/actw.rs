//! `ACTW`: an ordered list of named f32 tensors.
//!
//! ```text
//! magic "ACTW" | version u32 = 1 | tensor_count u32
//! per tensor: name_len u16 | name utf-8 | rank u8 | dims u32 x rank | f32 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const ACTW_MAGIC: [u8; 4] = *b"ACTW";
pub const ACTW_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Tensors in insertion order; names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
        if t.shape != shape {
            return Err(Error::Malformed(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn encode<W: Write>(&self, mut w: W) -> Result<u64> {
        let io = |e| Error::io("<actw stream>", e);
        let mut written = 0u64;
        let mut put = |w: &mut W, b: &[u8]| -> Result<()> {
            written += b.len() as u64;
            w.write_all(b).map_err(io)
        };
        put(&mut w, &ACTW_MAGIC)?;
        put(&mut w, &ACTW_VERSION.to_le_bytes())?;
        put(&mut w, &(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::Malformed(format!("tensor `{name}` header too large")));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Malformed(format!("tensor `{name}` has non-finite values")));
            }
            put(&mut w, &(name.len() as u16).to_le_bytes())?;
            put(&mut w, name.as_bytes())?;
            put(&mut w, &[t.shape.len() as u8])?;
            for &dim in &t.shape {
                put(&mut w, &(dim as u32).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(4 * t.data.len());
            for x in &t.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            put(&mut w, &payload)?;
        }
        w.flush().map_err(io)?;
        Ok(written)
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Malformed("truncated ACTW file".into()),
                _ => Error::io("<actw stream>", e),
            })?;
            Ok(b)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let magic: [u8; 4] = take(4)?.try_into().expect("4 bytes");
        if magic != ACTW_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: ACTW_MAGIC,
            });
        }
        let version = u32_at(&take(4)?);
        if version != ACTW_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let count = u32_at(&take(4)?);
        let mut out = TensorFile::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(name_len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let rank = take(1)?[0] as usize;
            let shape: Vec<usize> = take(4 * rank)?
                .chunks_exact(4)
                .map(|c| u32_at(c) as usize)
                .collect();
            let n: usize = shape.iter().product();
            let data = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if out.get(&name).is_some() {
                return Err(Error::Malformed(format!("duplicate tensor `{name}`")));
            }
            out.tensors.push((name, Tensor { shape, data }));
        }
        Ok(out)
    }
}

pub fn write_tensors(file: &TensorFile, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    super::ensure_parent(path)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    file.encode(BufWriter::new(f))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let mut tf = TensorFile::new();
        tf.insert("W", Tensor::new(vec![2, 3], (0..6).map(|x| x as f32).collect()).unwrap());
        tf.insert("b", Tensor::new(vec![3], vec![0.5, -0.5, 1.5]).unwrap());
        let mut bytes = Vec::new();
        let n = tf.encode(&mut bytes).unwrap();
        assert_eq!(n as usize, bytes.len());
        // 12 header + (2+1+1+8+24) + (2+1+1+4+12)
        assert_eq!(bytes.len(), 12 + 36 + 20);
        assert_eq!(TensorFile::decode(bytes.as_slice()).unwrap(), tf);
    }

    #[test]
    fn errors() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            TensorFile::decode(&b"ACTVxxxxxxxx"[..]),
            Err(Error::BadMagic { .. })
        ));
        let mut tf = TensorFile::new();
        tf.insert("x", Tensor::zeros(vec![4]));
        let mut bytes = Vec::new();
        tf.encode(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(TensorFile::decode(bytes.as_slice()).is_err());
        assert!(tf.require("x", &[5]).is_err());
        assert!(matches!(tf.require("y", &[4]), Err(Error::MissingTensor(_))));
    }
}
