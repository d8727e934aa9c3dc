//! `DLED` tensor container.
//!
//! Layout: 4-byte magic `DLED`, little-endian `u32` version, `u32` header
//! length, a JSON header listing `{name, shape, offset}` per tensor plus a
//! free-form `meta` object, then the concatenated little-endian `f64`
//! payloads. Offsets are in bytes from the start of the payload section.

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DLED";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Decoded container: metadata and named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()).into())
    }

    /// Fetches `name` and checks it has `shape`.
    pub fn get_as<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::Header(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            ))
            .into());
        }
        Ok(t.cast())
    }
}

pub fn encode<T: Scalar>(tensors: &[(&str, &Tensor<T>)], meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.numel() * 8;
    }
    let header = serde_json::to_vec(&Header { meta, tensors: entries })?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'b>(bytes: &'b [u8], offset: usize, needed: usize) -> Result<&'b [u8], CheckpointError> {
    bytes.get(offset..offset + needed).ok_or(CheckpointError::Truncated {
        offset,
        needed,
        available: bytes.len().saturating_sub(offset),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION }.into());
    }
    let hlen = u32::from_le_bytes(take(bytes, 8, 4)?.try_into().unwrap()) as usize;
    let header: Header =
        serde_json::from_slice(take(bytes, 12, hlen)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let base = 12 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let raw = take(bytes, base + e.offset, numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint { meta: header.meta, tensors })
}

pub fn save<T: Scalar>(path: &std::path::Path, tensors: &[(&str, &Tensor<T>)], meta: serde_json::Value) -> Result<()> {
    crate::io::write_atomic(path, &encode(tensors, meta)?)
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-300]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3], &[0.0, f64::MIN_POSITIVE, -0.0]).unwrap();
        encode(&[("a", &a), ("b", &b)], serde_json::json!({"k": 1})).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = decode(&sample()).unwrap();
        assert_eq!(ck.meta["k"], 1);
        assert_eq!(ck.get("a").unwrap().data(), &[1.0, -2.5, 3.25, 1e-300]);
        let b = ck.get("b").unwrap().data();
        assert_eq!(b[2].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn starts_with_magic_and_version() {
        let bytes = sample();
        assert_eq!(&bytes[..4], b"DLED");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn distinct_errors() {
        let mut bad = sample();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));
        let mut ver = sample();
        ver[4] = 9;
        assert!(matches!(decode(&ver), Err(Error::Checkpoint(CheckpointError::Version { found: 9, .. }))));
        let full = sample();
        let short = &full[..full.len() - 3];
        assert!(matches!(decode(short), Err(Error::Checkpoint(CheckpointError::Truncated { .. }))));
        assert!(matches!(decode(&full[..2]), Err(Error::Checkpoint(CheckpointError::Truncated { .. }))));
        let ck = decode(&full).unwrap();
        assert!(matches!(ck.get("zz"), Err(Error::Checkpoint(CheckpointError::MissingTensor(_)))));
        assert!(ck.get_as::<f64>("a", &[4]).is_err());
    }
}
