//! Flat checkpoint container.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of UTF-8 JSON
//! header, then the payload of little-endian `f32` values. The header lists every
//! layer with its id, shape, dtype and byte offset into the payload.
//!
//! A learnGene is stored as a container holding only the retained layers plus a
//! sidecar `<stem>.gene.json` mask descriptor.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genecraft::{GeneOrigin, LearnGene};
use crate::nn::{Layer, LayeredParams, Real};

pub const FORMAT: &str = "genefl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerEntry>,
}

pub fn encode<T: Real>(params: &LayeredParams<T>) -> Vec<u8> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.param_count() * 4);
    for layer in params.layers() {
        entries.push(LayerEntry {
            layer_id: layer.id.clone(),
            shape: layer.tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset: payload.len() as u64,
        });
        for &v in layer.tensor.iter() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = Header { format: FORMAT.into(), version: VERSION, layers: entries };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("truncated header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    Ok((header, &bytes[8 + n..]))
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<LayeredParams<T>> {
    let (header, payload) = read_header(bytes)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for e in &header.layers {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("layer `{}`: unsupported dtype {}", e.layer_id, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("layer `{}` runs past the payload", e.layer_id)))?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::Checkpoint(format!("layer `{}`: {err}", e.layer_id)))?;
        layers.push(Layer::new(e.layer_id.clone(), tensor));
    }
    LayeredParams::new(layers)
}

pub fn save<T: Real>(path: impl AsRef<Path>, params: &LayeredParams<T>) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<LayeredParams<T>> {
    decode(&fs::read(path)?)
}

/// JSON mask descriptor stored next to a gene container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneDescriptor {
    /// `(layer_id, bit)` for every unit of the architecture, in order.
    pub mask: Vec<(String, bool)>,
    pub gamma: usize,
    pub origin: GeneOrigin,
}

pub fn descriptor_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("gene");
    checkpoint.with_file_name(format!("{stem}.gene.json"))
}

pub fn save_gene<T: Real>(path: impl AsRef<Path>, gene: &LearnGene<T>) -> Result<()> {
    let path = path.as_ref();
    save(path, gene.tensors())?;
    let desc = GeneDescriptor { mask: gene.mask().to_vec(), gamma: gene.gamma(), origin: gene.origin };
    fs::write(descriptor_path(path), serde_json::to_string_pretty(&desc)?)?;
    Ok(())
}

pub fn load_gene<T: Real>(path: impl AsRef<Path>) -> Result<LearnGene<T>> {
    let path = path.as_ref();
    let tensors = load(path)?;
    let desc: GeneDescriptor = serde_json::from_slice(&fs::read(descriptor_path(path))?)?;
    if desc.gamma != desc.mask.iter().filter(|(_, b)| *b).count() {
        return Err(Error::Checkpoint("gamma disagrees with mask".into()));
    }
    LearnGene::from_parts(desc.mask, tensors, desc.origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpSpec;
    use proptest::prelude::*;

    #[test]
    fn header_lists_offsets_in_order() {
        let spec = MlpSpec::new(3, vec![2], 2);
        let model: LayeredParams<f32> = spec.init(4);
        let bytes = encode(&model);
        let (h, payload) = read_header(&bytes).unwrap();
        let offs: Vec<u64> = h.layers.iter().map(|e| e.offset).collect();
        assert_eq!(offs, vec![0, 24, 32, 48]);
        assert_eq!(payload.len(), 4 * spec.param_count());
        assert_eq!(h.layers[0].layer_id, "fc1.weight");
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode::<f32>(&[1, 2, 3]).is_err());
        let mut bytes = encode(&MlpSpec::new(2, vec![], 2).init::<f32>(1));
        bytes.truncate(bytes.len() - 2);
        assert!(decode::<f32>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), d in 1usize..6, h in 1usize..6, c in 2usize..5) {
            let model: LayeredParams<f32> = MlpSpec::new(d, vec![h], c).init(seed);
            let back: LayeredParams<f32> = decode(&encode(&model)).unwrap();
            prop_assert_eq!(back, model);
        }
    }
}
