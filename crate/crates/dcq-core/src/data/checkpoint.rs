//! Versioned binary checkpoint: the magic bytes "DCQ1", a length-prefixed
//! JSON topology header, then the raw little-endian f32 weight blobs in layer
//! order (weight then bias per parameterized layer). Round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::layer::{Layer, LayerOp};
use crate::network::Network;
use crate::quant::QuantConfig;
use crate::section::SplitPlan;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u8 = b'1';
const MAGIC: &[u8; 3] = b"DCQ";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDescriptor {
    Dense { in_dim: usize, out_dim: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Tanh,
    MaxPool2d { kernel: usize, stride: usize },
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    descriptor: LayerDescriptor,
    quant: Option<QuantConfig>,
    frozen: bool,
    block: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
    split_plan: Option<SplitPlan>,
    metadata: Metadata,
}

/// Free-form provenance carried inside the checkpoint.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Metadata {
    pub seeds: BTreeMap<String, u64>,
    pub hyperparameters: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub split_plan: Option<SplitPlan>,
    pub metadata: Metadata,
}

fn describe(layer: &Layer<f32>) -> LayerEntry {
    let descriptor = match &layer.op {
        LayerOp::Dense { weight, .. } => {
            LayerDescriptor::Dense { in_dim: weight.shape()[1], out_dim: weight.shape()[0] }
        }
        LayerOp::Conv2d { weight, stride, padding, .. } => LayerDescriptor::Conv2d {
            in_ch: weight.shape()[1],
            out_ch: weight.shape()[0],
            kernel: weight.shape()[2],
            stride: *stride,
            padding: *padding,
        },
        LayerOp::Relu => LayerDescriptor::Relu,
        LayerOp::Tanh => LayerDescriptor::Tanh,
        LayerOp::MaxPool2d { kernel, stride } => {
            LayerDescriptor::MaxPool2d { kernel: *kernel, stride: *stride }
        }
        LayerOp::Flatten => LayerDescriptor::Flatten,
        LayerOp::Softmax => LayerDescriptor::Softmax,
    };
    LayerEntry { descriptor, quant: layer.quant, frozen: layer.frozen, block: layer.block }
}

fn rebuild(entry: &LayerEntry) -> Result<Layer<f32>> {
    let mut layer = match entry.descriptor {
        LayerDescriptor::Dense { in_dim, out_dim } => Layer::dense(in_dim, out_dim, 0)?,
        LayerDescriptor::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
            Layer::conv2d(in_ch, out_ch, kernel, stride, padding, 0)?
        }
        LayerDescriptor::Relu => Layer::relu(),
        LayerDescriptor::Tanh => Layer::tanh(),
        LayerDescriptor::MaxPool2d { kernel, stride } => Layer::maxpool2d(kernel, stride)?,
        LayerDescriptor::Flatten => Layer::flatten(),
        LayerDescriptor::Softmax => Layer::softmax(),
    };
    layer.quant = entry.quant;
    layer.frozen = entry.frozen;
    layer.block = entry.block;
    Ok(layer)
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let header = Header {
        input_shape: checkpoint.net.input_shape().to_vec(),
        layers: checkpoint.net.layers().iter().map(describe).collect(),
        split_plan: checkpoint.split_plan.clone(),
        metadata: checkpoint.metadata.clone(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| DcqError::Format(format!("header serialization: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&[CHECKPOINT_VERSION])?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    for layer in checkpoint.net.layers() {
        if let (Some(w), Some(b)) = (layer.weight(), layer.bias()) {
            for &v in w.data() {
                file.write_all(&v.to_le_bytes())?;
            }
            for &v in b.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| DcqError::Format("file too short for a checkpoint header".into()))?;
    if &magic[..3] != MAGIC {
        return Err(DcqError::Format(format!("bad magic {:?}", &magic[..3])));
    }
    if magic[3] != CHECKPOINT_VERSION {
        return Err(DcqError::Format(format!(
            "unsupported checkpoint version {:?} (supported: {})",
            magic[3] as char, CHECKPOINT_VERSION as char
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| DcqError::Format("truncated header length".into()))?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)
        .map_err(|_| DcqError::Format("truncated topology header".into()))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| DcqError::Format(format!("header parse: {e}")))?;

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;

    let mut layers = Vec::with_capacity(header.layers.len());
    let mut offset = 0usize;
    for entry in &header.layers {
        let mut layer = rebuild(entry)?;
        if layer.has_params() {
            let w_shape = layer.weight().expect("params").shape().to_vec();
            let b_shape = layer.bias().expect("params").shape().to_vec();
            let w_len: usize = w_shape.iter().product();
            let b_len: usize = b_shape.iter().product();
            let need = (w_len + b_len) * 4;
            if offset + need > rest.len() {
                return Err(DcqError::Format(format!(
                    "weight blob needs {} bytes at offset {offset}, file has {}",
                    need,
                    rest.len()
                )));
            }
            let read_f32s = |bytes: &[u8]| -> Vec<f32> {
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect()
            };
            let w = Tensor::new(w_shape, read_f32s(&rest[offset..offset + w_len * 4]))?;
            offset += w_len * 4;
            let b = Tensor::new(b_shape, read_f32s(&rest[offset..offset + b_len * 4]))?;
            offset += b_len * 4;
            layer.set_params(w, b)?;
        }
        layers.push(layer);
    }
    if offset != rest.len() {
        return Err(DcqError::Format(format!(
            "{} trailing bytes after weight blobs",
            rest.len() - offset
        )));
    }
    let net = Network::new(header.input_shape, layers)?;
    Ok(Checkpoint { net, split_plan: header.split_plan, metadata: header.metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::section::{split_network, SplitPolicy};

    fn sample_net() -> Network<f32> {
        let mut net = Network::new(
            vec![1, 6, 6],
            vec![
                Layer::conv2d(1, 2, 3, 1, 0, 11).unwrap(),
                Layer::relu(),
                Layer::flatten(),
                Layer::dense(32, 4, 12).unwrap(),
                Layer::softmax(),
            ],
        )
        .unwrap();
        net.layer_mut(0).quant = Some(QuantConfig::binary());
        net
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dcq");
        let net = sample_net();
        let plan = split_network(&net, &SplitPolicy::PerKLayers(1)).unwrap();
        let mut metadata = Metadata::default();
        metadata.seeds.insert("init".into(), 11);
        metadata.hyperparameters.insert("lr".into(), "0.01".into());
        let ck = Checkpoint { net, split_plan: Some(plan.clone()), metadata: metadata.clone() };
        save_checkpoint(&path, &ck).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.split_plan, Some(plan));
        assert_eq!(loaded.metadata, metadata);
        for (a, b) in ck.net.layers().iter().zip(loaded.net.layers()) {
            assert_eq!(a.weight(), b.weight());
            assert_eq!(a.bias(), b.bias());
            assert_eq!(a.quant, b.quant);
        }
        // forward outputs bit-identical
        let x = Tensor::filled(&[1, 1, 6, 6], 0.5f32);
        assert_eq!(ck.net.forward(&x).unwrap(), loaded.net.forward(&x).unwrap());
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dcq");
        save_checkpoint(&path, &Checkpoint { net: sample_net(), split_plan: None, metadata: Metadata::default() })
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(&path) {
            Err(DcqError::Format(msg)) => assert!(msg.contains("blob") || msg.contains("bytes")),
            other => panic!("expected blob length error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dcq");
        save_checkpoint(&path, &Checkpoint { net: sample_net(), split_plan: None, metadata: Metadata::default() })
            .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(DcqError::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("{other:?}"),
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'D';
        bytes[3] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(DcqError::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("{other:?}"),
        }
    }
}
