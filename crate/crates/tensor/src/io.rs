//! Weight files.
//!
//! Layout: an 8-byte little-endian length `L`, then `L` bytes of UTF-8 JSON,
//! then every tensor's values as little-endian `f64` in declaration order.
//! The JSON is `{"meta": <caller header>, "tensors": [{"name", "shape"}...]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode(meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * floats);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| TensorError::Format("truncated length prefix".into()))?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| TensorError::Format("truncated JSON header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut offset = 8 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let count: usize = entry.shape.iter().product();
        let end = offset + 8 * count;
        let raw = bytes.get(offset..end).ok_or_else(|| {
            TensorError::Format(format!("tensor `{}` truncated", entry.name))
        })?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - offset
        )));
    }
    Ok((header.meta, tensors))
}

pub fn write_weights(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode(meta, tensors)?)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    decode(&fs::read(path)?)
}
