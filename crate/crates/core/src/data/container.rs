//! `.gdt` tensor container.
//!
//! Layout: `b"GDT1"`, little-endian `u32` header length `L`, `L` bytes of UTF-8
//! JSON header `{"entries": [{"name", "dtype": "f32", "shape"}], "meta": ...}`,
//! then the entries' little-endian `f32` payloads back to back in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::video::VideoTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDT1";
const VIDEO_ENTRY: &str = "video";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryHeader>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

/// Ordered named tensors plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, Tensor<f32>)>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let idx = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(idx).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            entries: self
                .entries
                .iter()
                .map(|(name, t)| EntryHeader { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec() })
                .collect(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.entries.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(8 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let version = |reason: &str| Error::Version { path: path.to_path_buf(), reason: reason.into() };
        let integrity = |reason: String| Error::Integrity { path: path.to_path_buf(), reason };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(version("bad magic, expected GDT1"));
        }
        if bytes.len() < 8 {
            return Err(integrity("truncated header length".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < header_len {
            return Err(integrity(format!("header length {header_len} exceeds file")));
        }
        let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| integrity(format!("unreadable header: {e}")))?;
        let payload = &body[header_len..];
        let mut expected = 0usize;
        for e in &header.entries {
            if e.dtype != "f32" {
                return Err(version(&format!("unsupported dtype {}", e.dtype)));
            }
            expected += e.shape.iter().product::<usize>() * 4;
        }
        if expected != payload.len() {
            return Err(integrity(format!("header declares {expected} payload bytes, found {}", payload.len())));
        }
        let mut entries = Vec::with_capacity(header.entries.len());
        let mut cursor = 0;
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let data =
                payload[cursor..cursor + n * 4].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            cursor += n * 4;
            entries.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self { entries, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_tensor(path: &Path, video: &VideoTensor) -> Result<()> {
    Container { entries: vec![(VIDEO_ENTRY.into(), video.to_tensor())], meta: serde_json::Value::Null }.save(path)
}

pub fn load_tensor(path: &Path) -> Result<VideoTensor> {
    let mut c = Container::load(path)?;
    let t =
        c.take(VIDEO_ENTRY).ok_or_else(|| Error::Integrity { path: path.to_path_buf(), reason: format!("no `{VIDEO_ENTRY}` entry") })?;
    VideoTensor::from_tensor(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        Container {
            entries: vec![
                ("a".into(), Tensor::from_vec(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0e7]).unwrap()),
                ("b".into(), Tensor::from_vec(&[3], vec![0.0, -0.0, 1.0]).unwrap()),
            ],
            meta: serde_json::json!({"step": 3}),
        }
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"GDT1");
        let l = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + l]).unwrap();
        assert_eq!(header["entries"][0]["dtype"], "f32");
        assert_eq!(header["entries"][1]["shape"], serde_json::json!([3]));
        assert_eq!(bytes.len(), 8 + l + 7 * 4);
        assert_eq!(&bytes[8 + l..8 + l + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupted_magic_is_a_version_error() {
        let mut bytes = sample().to_bytes();
        bytes[3] = b'2';
        assert!(matches!(Container::from_bytes(&bytes, Path::new("x")), Err(Error::Version { .. })));
    }

    #[test]
    fn payload_length_mismatch_is_an_integrity_error() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(Container::from_bytes(&bytes, Path::new("x")), Err(Error::Integrity { .. })));
        let mut bytes = sample().to_bytes();
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(Container::from_bytes(&bytes, Path::new("x")), Err(Error::Integrity { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/v.gdt");
        let v = VideoTensor::from_data(2, 1, 2, 1, vec![0.25, -1.0, 1.0, 0.5]).unwrap();
        save_tensor(&path, &v).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), v);
        assert!(matches!(load_tensor(&dir.path().join("missing.gdt")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 1..64)) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let c = Container {
                entries: vec![("t".into(), Tensor::from_vec(&[data.len()], data).unwrap())],
                meta: serde_json::Value::Null,
            };
            let back = Container::from_bytes(&c.to_bytes(), Path::new("p")).unwrap();
            let a: Vec<u32> = c.entries[0].1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.entries[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
