//! Checkpoint container: 8-byte magic, little-endian `u64` header length, a
//! JSON header (config plus tensor names, shapes and byte offsets), then the
//! tensors as raw little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"CANCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in model.params().named_tensors() {
        tensors.push(TensorEntry { name, rows: m.rows(), cols: m.cols(), offset });
        offset += m.len() * 8;
    }
    let header = Header { dtype: "f64".into(), config: model.config().clone(), tensors };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in model.params().named_tensors() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("slice of 8")) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    if header.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let data = &bytes[data_start..];
    let mut params = ModelParams::<f64>::init(&header.config);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            names.len(),
            header.tensors.len()
        )));
    }
    let mut expected_end = 0;
    let mut err = None;
    let mut idx = 0;
    params.visit_mut("", &mut |name, m| {
        if err.is_some() {
            return;
        }
        let e = &header.tensors[idx];
        idx += 1;
        if e.name != name || e.rows != m.rows() || e.cols != m.cols() {
            err = Some(Error::Checkpoint(format!(
                "tensor {} ({}x{}) does not match expected {} {:?}",
                e.name,
                e.rows,
                e.cols,
                name,
                m.shape()
            )));
            return;
        }
        let end = e.offset + m.len() * 8;
        if e.offset != expected_end || end > data.len() {
            err = Some(Error::Checkpoint(format!("tensor {} has a bad offset", e.name)));
            return;
        }
        for (v, chunk) in m.data_mut().iter_mut().zip(data[e.offset..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        expected_end = end;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if expected_end != data.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Model::from_params(header.config, params)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
