//! Versioned named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "NTC1" | version u32 | meta_len u32 | meta (UTF-8)
//! count u32 | count × { name_len u32 | name | width u8 (4|8) | ndim u32 | dims u64… | values }
//! payload_len u64 | sha256(payload) [32]
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Precision, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTC1";
const VERSION: u32 = 1;
const TRAILER: usize = 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub precision: Precision,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    /// Free-form metadata, by convention a JSON document.
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.precision.byte_width() as u8);
            let shape = t.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                match t.precision {
                    Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let payload_len = out.len() as u64;
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&payload_len.to_le_bytes());
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + TRAILER {
            return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - TRAILER);
        let declared = u64::from_le_bytes(trailer[..8].try_into().expect("8 bytes"));
        if declared != payload.len() as u64 {
            return Err(Error::Integrity(format!(
                "length mismatch: header says {declared} bytes, found {}",
                payload.len()
            )));
        }
        if Sha256::digest(payload).as_slice() != &trailer[8..] {
            return Err(Error::Integrity("checksum mismatch".into()));
        }

        let mut r = Reader { buf: payload, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported container version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Integrity("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            let precision = match r.take(1)?[0] {
                4 => Precision::F32,
                8 => Precision::F64,
                w => return Err(Error::Integrity(format!("{name}: bad value width {w}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * precision.byte_width())?;
            let data = match precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
            tensors.push(NamedTensor { name, precision, tensor });
        }
        if r.pos != payload.len() {
            return Err(Error::Integrity("trailing bytes after last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, c.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            meta: r#"{"step":3}"#.into(),
            tensors: vec![
                NamedTensor {
                    name: "a.w".into(),
                    precision: Precision::F64,
                    tensor: Tensor::new(vec![2, 2], vec![1.0, -2.5, 1e-300, 3.25]).unwrap(),
                },
                NamedTensor {
                    name: "b".into(),
                    precision: Precision::F32,
                    tensor: Tensor::new(vec![3], vec![0.5, 0.25, -8.0]).unwrap(),
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Container::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample().encode();
        for cut in [0, 10, bytes.len() - 1] {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x40;
        let err = Container::decode(&flipped).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
