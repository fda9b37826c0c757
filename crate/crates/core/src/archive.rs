//! Named-tensor archives (safetensors container) shared by checkpoints, memory
//! banks and persisted sessions.
//!
//! Every entry carries a dotted name, a shape and a little-endian payload.
//! Real-valued tensors are stored as `f32`, integer ones as `i64`, masks as `u8`.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Entry {
    pub fn from_tensor(t: &Tensor) -> Self {
        Entry::F32 { shape: t.shape().to_vec(), data: t.data().iter().map(|&x| x as f32).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32 { shape, .. } | Entry::I64 { shape, .. } | Entry::U8 { shape, .. } => shape,
        }
    }

    fn bytes(&self) -> (Dtype, Vec<u8>) {
        match self {
            Entry::F32 { data, .. } => (Dtype::F32, data.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Entry::I64 { data, .. } => (Dtype::I64, data.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Entry::U8 { data, .. } => (Dtype::U8, data.clone()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: BTreeMap<String, Entry>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.insert(name.into(), Entry::from_tensor(t));
    }

    pub fn put(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.insert(name.into(), e);
    }

    pub fn put_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("missing metadata key {key:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| Error::Archive(format!("missing entry {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.get(name)? {
            Entry::F32 { shape, data } => {
                Tensor::new(shape.clone(), data.iter().map(|&x| x as f64).collect())
            }
            _ => Err(Error::Archive(format!("entry {name:?} is not f32"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.get(name)? {
            Entry::I64 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Archive(format!("entry {name:?} is not i64"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name)? {
            Entry::U8 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Archive(format!("entry {name:?} is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payloads: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .entries
            .iter()
            .map(|(k, e)| {
                let (dt, b) = e.bytes();
                (k.clone(), dt, e.shape().to_vec(), b)
            })
            .collect();
        let views = payloads
            .iter()
            .map(|(k, dt, shape, b)| {
                TensorView::new(*dt, shape.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Archive(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = if self.metadata.is_empty() {
            None
        } else {
            Some(self.metadata.clone().into_iter().collect())
        };
        safetensors::serialize(views, meta).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let mut out = Archive::new();
        if let Some(m) = header.metadata() {
            out.metadata = m.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        }
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let raw = view.data();
            let entry = match view.dtype() {
                Dtype::F32 => Entry::F32 {
                    data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    shape,
                },
                Dtype::I64 => Entry::I64 {
                    data: raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
                    shape,
                },
                Dtype::U8 => Entry::U8 { data: raw.to_vec(), shape },
                other => return Err(Error::Archive(format!("unsupported dtype {other:?} for {name:?}"))),
            };
            if numel(entry.shape())
                != match &entry {
                    Entry::F32 { data, .. } => data.len(),
                    Entry::I64 { data, .. } => data.len(),
                    Entry::U8 { data, .. } => data.len(),
                }
            {
                return Err(Error::Archive(format!("entry {name:?} has inconsistent length")));
            }
            out.entries.insert(name, entry);
        }
        Ok(out)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("archive");
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_mixed_entries() {
        let mut a = Archive::new();
        a.put_tensor("w", &Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        a.put("idx", Entry::I64 { shape: vec![3], data: vec![1, -2, 3] });
        a.put("mask", Entry::U8 { shape: vec![2], data: vec![0, 1] });
        a.put_meta("k", "v");
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_bytes_fail() {
        let mut a = Archive::new();
        a.put_tensor("w", &Tensor::zeros(&[4, 4]));
        let bytes = a.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
