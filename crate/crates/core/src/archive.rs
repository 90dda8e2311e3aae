//! Named-tensor archive.
//!
//! Layout on disk:
//!
//! ```text
//! b"SRATNSR1"            8-byte magic
//! u64 (little endian)    length of the manifest in bytes
//! manifest               UTF-8 JSON: {"tensors":[{name,dtype,shape}..],"metadata":{..}}
//! payloads               raw little-endian elements, in manifest order
//! ```
//!
//! Checkpoints, datasets, sample dumps and PCA projections all use this format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{DType, Error, Result, Scalar};

const MAGIC: &[u8; 8] = b"SRATNSR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_vec<S: Scalar>(&self) -> Result<Vec<S>> {
        if self.dtype != S::DTYPE {
            return Err(Error::Archive {
                path: Default::default(),
                msg: format!(
                    "tensor {} has dtype {:?}, expected {:?}",
                    self.name,
                    self.dtype,
                    S::DTYPE
                ),
            });
        }
        Ok(self
            .bytes
            .chunks_exact(self.dtype.size())
            .map(S::read_le)
            .collect())
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        if self.dtype != DType::I64 {
            return Err(Error::Archive {
                path: Default::default(),
                msg: format!("tensor {} is {:?}, expected i64", self.name, self.dtype),
            });
        }
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub tensors: Vec<NamedTensor>,
    pub metadata: serde_json::Value,
}

impl Default for Archive {
    fn default() -> Self {
        Self::new()
    }
}

impl Archive {
    pub fn new() -> Self {
        Archive {
            tensors: Vec::new(),
            metadata: serde_json::Value::Object(Default::default()),
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], data: &[S]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length");
        let mut bytes = Vec::with_capacity(data.len() * S::DTYPE.size());
        for &x in data {
            x.write_le(&mut bytes);
        }
        self.tensors.push(NamedTensor {
            name: name.into(),
            dtype: S::DTYPE,
            shape: shape.to_vec(),
            bytes,
        });
    }

    pub fn push_i64(&mut self, name: impl Into<String>, shape: &[usize], data: &[i64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length");
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.tensors.push(NamedTensor {
            name: name.into(),
            dtype: DType::I64,
            shape: shape.to_vec(),
            bytes,
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Archive {
                path: Default::default(),
                msg: format!("missing tensor {name}"),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.tensors.iter().map(|t| t.bytes.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Archive {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a tensor archive (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| err(format!("manifest truncated: expected {header_len} bytes")))?;
        let manifest: Manifest =
            serde_json::from_slice(header).map_err(|e| err(format!("corrupt manifest: {e}")))?;

        let mut offset = 16 + header_len;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            if tensors.iter().any(|t: &NamedTensor| t.name == entry.name) {
                return Err(err(format!("duplicate tensor {}", entry.name)));
            }
            let len = entry
                .shape
                .iter()
                .try_fold(entry.dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| err(format!("tensor {} shape overflows", entry.name)))?;
            let available = bytes.len().saturating_sub(offset);
            if available < len {
                return Err(err(format!(
                    "payload for tensor {} truncated: expected {len} bytes, found {available}",
                    entry.name
                )));
            }
            tensors.push(NamedTensor {
                name: entry.name,
                dtype: entry.dtype,
                shape: entry.shape,
                bytes: bytes[offset..offset + len].to_vec(),
            });
            offset += len;
        }
        if offset != bytes.len() {
            return Err(err(format!(
                "{} trailing bytes after last payload",
                bytes.len() - offset
            )));
        }
        Ok(Archive {
            tensors,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new().with_metadata(serde_json::json!({"step": 3, "lr": 1e-4}));
        a.push::<f32>("w", &[2, 3], &[1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]);
        a.push::<f64>("v", &[2], &[std::f64::consts::PI, 1e-300]);
        a.push_i64("labels", &[3], &[0, 3, -1]);
        a
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes());
        assert_eq!(b.get("w").unwrap().to_vec::<f32>().unwrap()[2], 3.25);
        assert_eq!(b.get("labels").unwrap().to_i64().unwrap(), vec![0, 3, -1]);
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let bytes = sample().to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 30], Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tensor labels") || msg.contains("tensor v"), "{msg}");
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[20] = b'#';
        let err = Archive::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("corrupt manifest"));
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let a = sample();
        assert!(a.get("w").unwrap().to_vec::<f64>().is_err());
        assert!(a.get("nope").is_err());
    }

    #[test]
    fn empty_tensors_are_valid() {
        let mut a = Archive::new();
        a.push::<f32>("images", &[0, 1, 16, 16], &[]);
        a.push_i64("labels", &[0], &[]);
        let b = Archive::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(b.get("images").unwrap().numel(), 0);
    }
}
