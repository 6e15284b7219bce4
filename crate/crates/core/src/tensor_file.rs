//! Header-plus-raw-floats persistence shared by probes, counterfactuals,
//! model checkpoints and the model bridge.
//!
//! A file is one line of compact JSON terminated by `\n`, followed by the
//! little-endian payload of every tensor in header order, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "syntx-tensor";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub dtype: DType,
    pub byte_order: String,
    pub tensors: Vec<TensorSpec>,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dtype: DType,
    pub meta: Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(dtype: DType, meta: Value) -> Self {
        TensorFile {
            dtype,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_TAG.to_string(),
            dtype: self.dtype,
            byte_order: "LE".to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorSpec {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for t in &self.tensors {
            for &x in &t.data {
                match self.dtype {
                    DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("missing header terminator"))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::format(format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(Error::format(format!("unknown format tag {:?}", header.format)));
        }
        if header.byte_order != "LE" {
            return Err(Error::format(format!(
                "unsupported byte order {:?}",
                header.byte_order
            )));
        }
        let payload = &bytes[newline + 1..];
        let width = header.dtype.width();
        let declared: usize = header.tensors.iter().map(TensorSpec::numel).sum::<usize>() * width;
        if declared != payload.len() {
            return Err(Error::format(format!(
                "header declares {declared} payload bytes, file has {}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for spec in header.tensors {
            let len = spec.numel() * width;
            let chunk = &payload[offset..offset + len];
            offset += len;
            let data = match header.dtype {
                DType::F64 => chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            tensors.push(NamedTensor {
                name: spec.name,
                shape: spec.shape,
                data,
            });
        }
        Ok(TensorFile {
            dtype: header.dtype,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        TensorFile::from_bytes(&fs::read(path)?)
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
