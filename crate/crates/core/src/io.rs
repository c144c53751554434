//! Portable tensor files.
//!
//! Single tensor (`.dst`), all integers little-endian:
//!
//! ```text
//! b"DSTN"  u32 rank  u64 extent × rank  f64 value × product(extents)
//! ```
//!
//! Container (`.dsc`) holding a JSON metadata document and named tensors:
//!
//! ```text
//! b"DSCT"  u32 version(=1)  u64 meta_len  meta (UTF-8 JSON)
//! u32 count  { u32 name_len  name (UTF-8)  <single tensor record> } × count
//! ```
//!
//! The metadata carries a `manifest` listing every tensor name with its shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"DSTN";
const CONTAINER_MAGIC: &[u8; 4] = b"DSCT";
const CONTAINER_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("tensor extents overflow".into()))?;
    let mut bytes = vec![0u8; numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Named tensors plus a free-form JSON metadata document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("container has no tensor named {name:?}")))
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.tensors
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut meta = self.meta.clone();
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert("manifest".into(), serde_json::to_value(self.manifest())?);
        }
        let meta = serde_json::to_vec(&meta)?;
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let magic: [u8; 4] = read_array(r)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Format(format!("bad container magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let mut meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let manifest: Option<Vec<ManifestEntry>> = match &mut meta {
            serde_json::Value::Object(map) => map
                .remove("manifest")
                .map(serde_json::from_value)
                .transpose()?,
            _ => None,
        };
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
            tensors.push((name, read_tensor(r)?));
        }
        let c = Self { meta, tensors };
        if let Some(m) = manifest {
            if m != c.manifest() {
                return Err(Error::Format("manifest disagrees with stored tensors".into()));
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

/// CSV dump of a rank-1 or rank-2 tensor, one matrix row per line, values in
/// shortest round-trip form.
pub fn tensor_to_csv(t: &Tensor) -> Result<String> {
    let (m, n) = match t.shape() {
        [] => (1, 1),
        [n] => (1, *n),
        [m, n] => (*m, *n),
        s => return Err(Error::shape(format!("CSV dump of rank-{} tensor {s:?}", s.len()))),
    };
    let mut out = String::new();
    for i in 0..m {
        let row: Vec<String> = t.data()[i * n..(i + 1) * n]
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn tensor_from_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad CSV value {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_binary_round_trip(shape in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"DSTN");
        assert_eq!(&buf[4..8], &[2, 0, 0, 0]);
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
    }

    #[test]
    fn container_round_trip_with_manifest() {
        let mut c = Container::new(serde_json::json!({"kind": "test"}));
        c.push("a", Tensor::eye(2));
        c.push("b", Tensor::zeros(&[3]));
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Container::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("b").unwrap().shape(), &[3]);
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::eye(1)).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-17, 7.0]]).unwrap();
        let text = tensor_to_csv(&t).unwrap();
        assert_eq!(tensor_from_csv(&text).unwrap(), t);
    }
}
