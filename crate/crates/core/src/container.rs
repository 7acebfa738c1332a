//! Self-describing binary container for named arrays.
//!
//! Layout: 8-byte magic, `u32` little-endian header length, a JSON header
//! (free-form metadata plus a tensor table) and the little-endian payloads in
//! table order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSEGCNT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TableEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: TensorData) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Container(format!(
                "tensor {name}: shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TableEntry {
                    name: t.name.clone(),
                    dtype: t.data.dtype().into(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => {
                    let start = out.len();
                    out.resize(start + 4 * v.len(), 0);
                    LittleEndian::write_f32_into(v, &mut out[start..]);
                }
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Container("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Container("truncated header length".into()))? as usize;
        if r.len() < len {
            return Err(Error::Container("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "f32" => {
                    let bytes = take(&mut r, 4 * n, &e.name)?;
                    let mut v = vec![0f32; n];
                    LittleEndian::read_f32_into(bytes, &mut v);
                    TensorData::F32(v)
                }
                "u8" => TensorData::U8(take(&mut r, n, &e.name)?.to_vec()),
                other => {
                    return Err(Error::Container(format!(
                        "tensor {}: unknown dtype {other}",
                        e.name
                    )))
                }
            };
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if !r.is_empty() {
            return Err(Error::Container(format!("{} trailing bytes", r.len())));
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }

    /// Reads only the metadata block.
    pub fn read_meta(path: impl AsRef<Path>) -> Result<serde_json::Value> {
        let path = path.as_ref();
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; 12];
        f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        if &head[..8] != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let len = LittleEndian::read_u32(&head[8..]) as usize;
        let mut json = vec![0u8; len];
        f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&json)?;
        Ok(header.meta)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize, name: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Container(format!("tensor {name}: truncated payload")));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "test", "n": 3}));
        c.push("a", vec![2, 3], TensorData::F32(vec![0.5, -1.0, 2.25, 1e-30, f32::MAX, 0.0]))
            .unwrap();
        c.push("b", vec![4], TensorData::U8(vec![0, 1, 2, 255])).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        // Deterministic encoding.
        assert_eq!(bytes, sample().to_bytes().unwrap());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn shape_checked_on_push() {
        let mut c = Container::new(serde_json::Value::Null);
        assert!(c.push("x", vec![3], TensorData::U8(vec![1, 2])).is_err());
    }

    #[test]
    fn meta_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        sample().write(&p).unwrap();
        assert_eq!(Container::read_meta(&p).unwrap()["n"], 3);
    }
}
