//! Tensor container files.
//!
//! Layout: the 8 magic bytes `SFCT0001`, a little-endian `u64` header length,
//! a UTF-8 JSON header mapping each tensor name to its dtype, shape, byte
//! offset and byte length (offsets relative to the start of the data
//! section), then the raw little-endian element data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SFCT0001";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        let offset = data.len() as u64;
        match t.dtype() {
            DType::F32 => {
                for &v in t.data() {
                    data.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        header.insert(
            name.clone(),
            Entry {
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset,
                length: data.len() as u64 - offset,
            },
        );
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Container("header runs past end of file".into()))?;
    let header: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| Error::Container(format!("header: {e}")))?;
    let data = &bytes[data_start..];
    let mut out = BTreeMap::new();
    for (name, e) in header {
        let numel: usize = e.shape.iter().product();
        if e.length as usize != numel * e.dtype.size_of() {
            return Err(Error::Container(format!("`{name}`: length does not match shape")));
        }
        let start = e.offset as usize;
        let end = start
            .checked_add(e.length as usize)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| Error::Container(format!("`{name}`: data out of bounds")))?;
        let raw = &data[start..end];
        let values: Vec<f64> = match e.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(e.shape, values)?.with_dtype(e.dtype);
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_starts_with_magic_and_header_length() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..8], b"SFCT0001");
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["a"]["dtype"], "f64");
        assert_eq!(header["a"]["length"], 16);
        assert_eq!(bytes.len(), 16 + hl + 16);
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        assert!(decode(b"NOTMAGIC00000000").is_err());
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode(&m).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f64>(), 0..40),
            b in proptest::collection::vec(-1e30f64..1e30, 1..40),
        ) {
            let mut m = BTreeMap::new();
            m.insert("a".to_string(), Tensor::vector(a));
            m.insert("b32".to_string(), Tensor::vector(b).to_f32());
            let back = decode(&encode(&m).unwrap()).unwrap();
            for (k, t) in &m {
                let u = &back[k];
                prop_assert_eq!(t.shape(), u.shape());
                prop_assert_eq!(t.dtype(), u.dtype());
                let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
                let ubits: Vec<u64> = u.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits, ubits);
            }
        }
    }
}
