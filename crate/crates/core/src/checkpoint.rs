//! Checkpoint files: one JSON header line, then every parameter as raw
//! little-endian `f32`, in name order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{Network, NetworkConfig};
use crate::tensor::{Shape, Tensor};

pub const FORMAT: &str = "vidseg-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub config_hash: String,
    pub network: NetworkConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance, e.g. the training configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(net: &Network<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let tensors = net
        .params
        .by_name()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().dims(),
        })
        .collect();
    let header = Header {
        format: FORMAT.to_string(),
        config_hash: net.config.digest(),
        network: net.config.clone(),
        tensors,
        meta,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in net.params.by_name() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, net: &Network<f32>, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Network<f32>, Header)> {
    let bad = |reason: String| Error::format(path, reason);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", header.format)));
    }
    if header.network.digest() != header.config_hash {
        return Err(bad("configuration hash does not match the stored configuration".into()));
    }
    let mut net = Network::<f32>::build(header.network.clone(), 0)
        .map_err(|e| bad(format!("stored configuration is invalid: {e}")))?;
    let expected: Vec<(String, [usize; 4])> = net
        .params
        .by_name()
        .map(|(n, t)| (n.to_string(), t.shape().dims()))
        .collect();
    let stored: Vec<(String, [usize; 4])> = header.tensors.iter().map(|e| (e.name.clone(), e.shape)).collect();
    if expected != stored {
        return Err(bad("parameter names or shapes do not match the configuration".into()));
    }
    let payload = &bytes[split + 1..];
    let need: usize = stored.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
    if payload.len() != need {
        return Err(bad(format!("payload has {} bytes, expected {need}", payload.len())));
    }
    let mut offset = 0;
    for (name, dims) in stored {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape.numel();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += 4 * n;
        net.params.assign(&name, Tensor::from_vec(shape, data)?)?;
    }
    Ok((net, header))
}

pub fn load(path: &Path) -> Result<(Network<f32>, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
