//! Binary tensor container, atomic writes and content hashing.
//!
//! Layout of a tensor file (all integers little-endian):
//!
//! ```text
//! magic        8 bytes
//! header_len   u64
//! header       JSON: {"meta": {...}, "tensors": [{"name": .., "shape": [..]}, ..]}
//! payload      f64 values of every tensor, in header order
//! crc64        u64, CRC-64/ECMA-182 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        TensorEntry {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Short stable hash of any serializable value (first 16 hex digits of the
/// SHA-256 of its JSON form).
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    sha256_hex(&bytes)[..16].to_string()
}

pub fn encode_tensor_file(
    magic: &[u8; 8],
    meta: serde_json::Value,
    tensors: &[TensorEntry],
) -> Result<Vec<u8>> {
    for t in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
    }
    let header = FileHeader {
        meta,
        tensors: tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let hbytes = serde_json::to_vec(&header)?;
    let payload_len: usize = tensors.iter().map(|t| t.data.len() * 8).sum();
    let mut out = Vec::with_capacity(8 + 8 + hbytes.len() + payload_len + 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&hbytes);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_tensor_file(
    path: &Path,
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(serde_json::Value, Vec<TensorEntry>)> {
    let checksum_err = |detail: &str| Error::Checksum {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 24 {
        return Err(checksum_err("file too short to carry a checksum trailer"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc64(body);
    if stored != actual {
        return Err(checksum_err(&format!(
            "stored crc64 {stored:016x}, computed {actual:016x}"
        )));
    }
    if &body[..8] != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&body[..8]),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let format_err = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if 16 + hlen > body.len() {
        return Err(format_err("header length exceeds file size".into()));
    }
    let header: FileHeader = serde_json::from_slice(&body[16..16 + hlen])?;
    let mut offset = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for th in header.tensors {
        let n: usize = th.shape.iter().product();
        let end = offset + n * 8;
        if end > body.len() {
            return Err(format_err(format!("tensor {} runs past end of file", th.name)));
        }
        let data = body[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        tensors.push(TensorEntry {
            name: th.name,
            shape: th.shape,
            data,
        });
    }
    if offset != body.len() {
        return Err(format_err(format!(
            "{} trailing payload bytes",
            body.len() - offset
        )));
    }
    Ok((header.meta, tensors))
}

pub fn write_tensor_file(
    path: &Path,
    magic: &[u8; 8],
    meta: serde_json::Value,
    tensors: &[TensorEntry],
) -> Result<()> {
    let bytes = encode_tensor_file(magic, meta, tensors)?;
    write_atomic(path, &bytes)
}

pub fn read_tensor_file(
    path: &Path,
    magic: &[u8; 8],
) -> Result<(serde_json::Value, Vec<TensorEntry>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor_file(path, magic, &bytes)
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Pull a named tensor out of a decoded list, checking its shape.
pub fn take_tensor(
    tensors: &mut Vec<TensorEntry>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<f64>> {
    let idx = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::Data(format!("missing tensor {name}")))?;
    let t = tensors.swap_remove(idx);
    if t.shape != shape {
        return Err(Error::Shape(format!(
            "tensor {name} has shape {:?}, header implies {:?}",
            t.shape, shape
        )));
    }
    Ok(t.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"ULABTEST";

    fn sample() -> Vec<TensorEntry> {
        vec![
            TensorEntry::new("a", vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]),
            TensorEntry::new("b", vec![3], vec![0.1, 0.2, 0.3]),
        ]
    }

    #[test]
    fn encode_decode_roundtrip() {
        let meta = serde_json::json!({"k": 1});
        let bytes = encode_tensor_file(MAGIC, meta.clone(), &sample()).unwrap();
        let (m, t) = decode_tensor_file(Path::new("x"), MAGIC, &bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(t, sample());
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let bytes = encode_tensor_file(MAGIC, serde_json::json!({}), &sample()).unwrap();
        for cut in [1, 9, bytes.len() / 2] {
            let r = decode_tensor_file(Path::new("x"), MAGIC, &bytes[..bytes.len() - cut]);
            assert!(matches!(r, Err(Error::Checksum { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(
            decode_tensor_file(Path::new("x"), MAGIC, &flipped),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let bytes = encode_tensor_file(MAGIC, serde_json::json!({}), &sample()).unwrap();
        assert!(matches!(
            decode_tensor_file(Path::new("x"), b"OTHERMAG", &bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn sha_and_config_hash_are_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(config_hash(&vec![1, 2]), config_hash(&vec![1, 2]));
        assert_ne!(config_hash(&vec![1, 2]), config_hash(&vec![2, 1]));
    }
}
