//! Binary array container shared by model checkpoints and prototype banks.
//!
//! ```text
//! MMAPCKPT-1\n
//! u64 LE     manifest length in bytes
//! manifest   JSON: kind, free-form meta, and per array {name, shape, dtype, offset, nbytes}
//! data       arrays back to back, little-endian IEEE-754 f64 / two's-complement i64
//! ```
//! Offsets are relative to the start of the data section.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MmapError, Result};
use crate::params::Matrix;

pub const MAGIC: &str = "MMAPCKPT-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    I64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

fn fmt_err(msg: impl Into<String>) -> MmapError {
    MmapError::Checkpoint(msg.into())
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: ArrayData::F64(m.iter().copied().collect()),
        });
    }

    pub fn push_i64(&mut self, name: impl Into<String>, values: Vec<i64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: vec![values.len()],
            data: ArrayData::I64(values),
        });
    }

    fn find(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| fmt_err(format!("array `{name}` missing")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let a = self.find(name)?;
        match (&a.data, a.shape.as_slice()) {
            (ArrayData::F64(v), &[r, c]) => {
                Array2::from_shape_vec((r, c), v.clone()).map_err(|e| fmt_err(format!("{name}: {e}")))
            }
            _ => Err(fmt_err(format!("array `{name}` is not a 2-D f64 array"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<Vec<i64>> {
        match &self.find(name)?.data {
            ArrayData::I64(v) => Ok(v.clone()),
            ArrayData::F64(_) => Err(fmt_err(format!("array `{name}` is not i64"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut data = Vec::new();
        for a in &self.arrays {
            let start = data.len() as u64;
            let dtype = match &a.data {
                ArrayData::F64(v) => {
                    v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes()));
                    DType::F64
                }
                ArrayData::I64(v) => {
                    v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes()));
                    DType::I64
                }
            };
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype,
                offset: start,
                nbytes: data.len() as u64 - start,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            format: MAGIC.to_string(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 9 + manifest.len() + data.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 1;
        if bytes.len() < header + 8 || &bytes[..MAGIC.len()] != MAGIC.as_bytes() || bytes[MAGIC.len()] != b'\n' {
            return Err(fmt_err(format!("missing `{MAGIC}` header")));
        }
        let len = u64::from_le_bytes(bytes[header..header + 8].try_into().expect("8 bytes")) as usize;
        let manifest_start = header + 8;
        let data_start = manifest_start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt_err("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..data_start])?;
        if manifest.format != MAGIC {
            return Err(fmt_err(format!("unsupported format `{}`", manifest.format)));
        }
        let data = &bytes[data_start..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let count: usize = e.shape.iter().product();
            let (s, n) = (e.offset as usize, e.nbytes as usize);
            if n != count * 8 || s.checked_add(n).is_none_or(|end| end > data.len()) {
                return Err(fmt_err(format!("array `{}` has inconsistent extent", e.name)));
            }
            let chunks = data[s..s + n].chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
            let payload = match e.dtype {
                DType::F64 => ArrayData::F64(chunks.map(f64::from_le_bytes).collect()),
                DType::I64 => ArrayData::I64(chunks.map(i64::from_le_bytes).collect()),
            };
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: payload,
            });
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(MmapError::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn header_and_manifest_layout() {
        let mut c = Container::new("model", serde_json::json!({"stage": "stage1"}));
        c.push_matrix("w", &array![[1.0, -2.5]]);
        c.push_i64("counts", vec![3, -4]);
        let bytes = c.to_bytes().unwrap();
        assert!(bytes.starts_with(b"MMAPCKPT-1\n"));
        let len = u64::from_le_bytes(bytes[11..19].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[19..19 + len]).unwrap();
        assert_eq!(manifest["arrays"][1]["offset"], 16);
        assert_eq!(manifest["arrays"][1]["dtype"], "i64");
        let data = &bytes[19 + len..];
        assert_eq!(data.len(), 32);
        assert_eq!(f64::from_le_bytes(data[8..16].try_into().unwrap()), -2.5);
    }

    #[test]
    fn corrupted_input_is_rejected() {
        assert!(Container::from_bytes(b"NOTMAGIC").is_err());
        let mut c = Container::new("bank", serde_json::Value::Null);
        c.push_matrix("m", &array![[1.0]]);
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_preserves_arrays(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in proptest::collection::vec(-1e6f64..1e6, 25),
            ints in proptest::collection::vec(any::<i64>(), 0..10),
        ) {
            let m = Array2::from_shape_fn((rows, cols), |(r, c)| seed[r * 5 + c]);
            let mut c = Container::new("model", serde_json::json!({"k": 1}));
            c.push_matrix("m", &m);
            c.push_i64("i", ints.clone());
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.matrix("m").unwrap(), m);
            prop_assert_eq!(back.i64s("i").unwrap(), ints);
            prop_assert_eq!(back, c);
        }
    }
}
