//! Checkpoint container: magic, format version, JSON header, name-sorted
//! little-endian f64 parameter blocks, SHA-256 trailer.
//!
//! The same container carries both the translator and the dual encoder,
//! distinguished by the `kind` tag in the header.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, TransformerModel};

const MAGIC: &[u8; 4] = b"HLGD";
const FORMAT_VERSION: u32 = 1;

pub const KIND_TRANSLATOR: &str = "translator";
pub const KIND_DUAL_ENCODER: &str = "dual_encoder";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
}

/// Write a named parameter collection with a self-describing header.
pub fn save_params(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    params: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        config: config.clone(),
    })
    .map_err(|e| Error::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    body.extend_from_slice(&(header.len() as u64).to_le_bytes());
    body.extend_from_slice(&header);
    body.extend_from_slice(&(params.len() as u64).to_le_bytes());
    // BTreeMap iteration is name-sorted, making the byte stream canonical.
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        body.extend_from_slice(&(name_bytes.len() as u64).to_le_bytes());
        body.extend_from_slice(name_bytes);
        body.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &dim in tensor.shape() {
            body.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&body).map_err(|e| Error::io(path, e))?;
    file.write_all(&digest).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: &str) -> Error {
        Error::CorruptFile {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(self.corrupt("truncated body"));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Read a container back; verifies magic, version, and checksum.
pub fn load_params(path: &Path) -> Result<(String, serde_json::Value, BTreeMap<String, Tensor>)> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "file shorter than fixed framing".into(),
        });
    }
    let (body, trailer) = raw.split_at(raw.len() - 32);
    let mut r = Reader { body, pos: 0, path };
    if Sha256::digest(body).as_slice() != trailer {
        return Err(r.corrupt("checksum mismatch"));
    }

    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.take_u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let n_params = r.take_u64()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name_len = r.take_u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.corrupt("parameter name is not UTF-8"))?;
        let rank = r.take_u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let dim = r.take_u64()? as usize;
            numel = numel.saturating_mul(dim);
            shape.push(dim);
        }
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("parameter {name}: {e}"),
        })?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("duplicate parameter {name}"),
            });
        }
    }
    if r.pos != body.len() {
        return Err(r.corrupt("trailing bytes after parameters"));
    }
    Ok((header.kind, header.config, params))
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    let config = serde_json::to_value(&model.config).expect("config serializes");
    save_params(path, KIND_TRANSLATOR, &config, model.params())
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let (kind, config, params) = load_params(path)?;
    if kind != KIND_TRANSLATOR {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("checkpoint kind {kind:?}, expected {KIND_TRANSLATOR:?}"),
        });
    }
    let config: ModelConfig = serde_json::from_value(config).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    TransformerModel::from_parts(config, params)
}
