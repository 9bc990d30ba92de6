//! Flat little-endian `f32` parameter container with a JSON index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

use super::Real;

const FORMAT: &str = "l2d-tensor-container";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary block.
    pub offset: u64,
}

impl ContainerEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format: String,
    version: u32,
    dtype: String,
    tensors: Vec<ContainerEntry>,
    #[serde(default)]
    header: serde_json::Value,
}

/// Named tensors stored back to back as 32-bit floats.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<ContainerEntry>,
    data: Vec<f32>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Real>(&mut self, name: &str, shape: &[usize], values: &[T]) -> Result<()> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::config(format!(
                "tensor {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::config(format!("duplicate tensor name {name}")));
        }
        self.entries.push(ContainerEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: (self.data.len() * 4) as u64,
        });
        self.data
            .extend(values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        Ok(())
    }

    pub fn entries(&self) -> &[ContainerEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        let e = self.entries.iter().find(|e| e.name == name)?;
        let start = e.offset as usize / 4;
        Some((&e.shape, &self.data[start..start + e.numel()]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn checksum(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }

    /// Rebuilds a container from an index and a raw block, validating every
    /// offset against the block length.
    pub fn from_parts(entries: Vec<ContainerEntry>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 4 != 0 {
            return Err(Error::format(
                bytes.len() as u64,
                "binary block length is not a multiple of 4",
            ));
        }
        let mut expected = 0u64;
        for e in &entries {
            if e.offset != expected {
                return Err(Error::format(
                    e.offset,
                    format!("tensor {} expected at offset {expected}", e.name),
                ));
            }
            expected += 4 * e.numel() as u64;
            if expected > bytes.len() as u64 {
                return Err(Error::format(
                    bytes.len() as u64,
                    format!("tensor {} runs past end of data (needs {expected} bytes)", e.name),
                ));
            }
        }
        if expected != bytes.len() as u64 {
            return Err(Error::format(expected, "trailing bytes after last tensor"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Container { entries, data })
    }

    /// Writes `<bin>` and its JSON index `<index>`; `header` is stored
    /// verbatim in the index.
    pub fn write(&self, bin: &Path, index: &Path, header: serde_json::Value) -> Result<()> {
        fs::write(bin, self.to_bytes())?;
        let idx = Index {
            format: FORMAT.to_string(),
            version: VERSION,
            dtype: "f32le".to_string(),
            tensors: self.entries.clone(),
            header,
        };
        fs::write(index, serde_json::to_string_pretty(&idx)?)?;
        Ok(())
    }

    pub fn read(bin: &Path, index: &Path) -> Result<(Self, serde_json::Value)> {
        let text = fs::read_to_string(index)?;
        let idx: Index = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("bad container index: {e}")))?;
        if idx.format != FORMAT || idx.version != VERSION || idx.dtype != "f32le" {
            return Err(Error::format(
                0,
                format!("unsupported container {} v{} ({})", idx.format, idx.version, idx.dtype),
            ));
        }
        let bytes = fs::read(bin)?;
        Ok((Self::from_parts(idx.tensors, &bytes)?, idx.header))
    }
}
