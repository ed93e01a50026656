//! Binary network checkpoints.
//!
//! Layout: magic `OPN1` (4 bytes), u32 LE version, u64 LE header length `L`,
//! `L` bytes of UTF-8 JSON (layer specs, split index, tensor shapes, byte
//! offsets, base seed), then contiguous little-endian IEEE-754 32-bit weight
//! data in header order. The JSON field order is fixed by the structs below,
//! so identical networks serialize to identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, LayerSpec, SplitNetwork};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OPN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    split_index: usize,
    base_seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    param: String,
    shape: Vec<usize>,
    /// Byte offset within the data section.
    offset: u64,
    /// Element count.
    len: u64,
}

/// Serializes the network to `path`.
///
/// Weight data is stored as f32; callers that need save/load round trips to
/// be bit-exact quantize the network first (training does this for you).
pub fn save(net: &SplitNetwork, path: &Path) -> Result<()> {
    let bytes = to_bytes(net)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn to_bytes(net: &SplitNetwork) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::<u8>::new();
    for (li, layer) in net.layers().iter().enumerate() {
        for (param, tensor) in [("weight", layer.weight()), ("bias", layer.bias())] {
            if let Some(t) = tensor {
                tensors.push(TensorEntry {
                    layer: li,
                    param: param.to_string(),
                    shape: t.shape().to_vec(),
                    offset: data.len() as u64,
                    len: t.len() as u64,
                });
                for &v in t.data() {
                    data.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    let header = Header {
        input_shape: net.input_shape().to_vec(),
        layers: net.layers().iter().map(|l| *l.spec()).collect(),
        split_index: net.split_index(),
        base_seed: net.base_seed(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format {
        path: "<memory>".into(),
        detail: e.to_string(),
    })?;

    let mut out = Vec::with_capacity(16 + header_json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn load(path: &Path) -> Result<SplitNetwork> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes, &path.display().to_string())
}

pub fn from_bytes(bytes: &[u8], path: &str) -> Result<SplitNetwork> {
    let fail = |detail: &str| Error::format(path, detail);
    if bytes.len() < 16 {
        return Err(fail("file shorter than the fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, expected OPN1"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| fail(&format!("invalid JSON header: {e}")))?;
    let data = &bytes[header_end..];

    let mut params: Vec<(Option<Tensor>, Option<Tensor>)> =
        header.layers.iter().map(|_| (None, None)).collect();
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        if end > data.len() {
            return Err(fail(&format!(
                "tensor for layer {} runs past end of file",
                entry.layer
            )));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| fail(&format!("tensor for layer {}: {e}", entry.layer)))?;
        let slot = params
            .get_mut(entry.layer)
            .ok_or_else(|| fail(&format!("tensor references layer {}", entry.layer)))?;
        match entry.param.as_str() {
            "weight" => slot.0 = Some(tensor),
            "bias" => slot.1 = Some(tensor),
            other => return Err(fail(&format!("unknown parameter kind '{other}'"))),
        }
    }

    let layers: Vec<Layer> = header
        .layers
        .iter()
        .zip(params)
        .map(|(&spec, (weight, bias))| Layer::from_parts(spec, weight, bias))
        .collect::<Result<_>>()
        .map_err(|e| fail(&e.to_string()))?;
    SplitNetwork::from_parts(
        header.input_shape,
        layers,
        header.split_index,
        header.base_seed,
    )
}
