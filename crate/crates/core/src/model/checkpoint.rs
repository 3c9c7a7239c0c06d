//! Checkpoint file: `COCKPT01`, a little-endian u64 header length, a JSON
//! header (config, classes, step, tensor index), then every tensor as
//! row-major little-endian f32 in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters, Tensor};
use crate::dataset::sha256_hex;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"COCKPT01";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub classes: Vec<String>,
    pub step: u64,
    pub params: Parameters,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    classes: Vec<String>,
    step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, classes: Vec<String>, step: u64, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if classes.len() != config.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for {} classes",
                classes.len(),
                config.num_classes
            )));
        }
        Ok(Self {
            config,
            classes,
            step,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .params
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len() * 4;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            config: self.config.clone(),
            classes: self.classes.clone(),
            step: self.step,
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.params.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if len > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let data = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset..e.offset + n * 4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past end of file", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data: values,
            });
        }
        Self::new(header.config, header.classes, header.step, Parameters { tensors })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

/// Loads a checkpoint and returns it with its model id (SHA-256 of the file).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Checkpoint, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok((Checkpoint::from_bytes(&bytes)?, sha256_hex(&bytes)))
}
