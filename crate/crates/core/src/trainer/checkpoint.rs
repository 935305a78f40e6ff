//! Binary checkpoint: `FCKP`, a version byte, a little-endian `u32` header
//! length, the JSON header, then every tensor as little-endian `f32`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Stage, TrainConfig};
use crate::encoders::{encode, Encoder, EncoderConfig, ParamStore};
use crate::error::{Error, Result};
use crate::objectives::ClassifierHead;
use crate::seqdata::{Dataset, LabelMap};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCKP";
pub const CHECKPOINT_VERSION: u8 = 1;
const HEAD_TENSOR: &str = "head.weight";
const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    scale: f64,
    label_smoothing: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    epoch: usize,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    speakers: Vec<String>,
    label_map_hash: String,
    head: Option<HeadMeta>,
    tensors: Vec<TensorEntry>,
}

/// Trained encoder, optional classifier head and the label map they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub encoder_config: EncoderConfig,
    pub train_config: TrainConfig,
    pub encoder: ParamStore<f32>,
    pub head: Option<ClassifierHead>,
    pub label_map: LabelMap,
}

/// SHA-256 over parameter names, shapes and raw values.
pub fn param_hash(params: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (name, v) in params.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in v.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in v.iter() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn encoder_hash(&self) -> String {
        param_hash(&self.encoder)
    }

    pub fn build_encoder(&self) -> Result<Encoder> {
        let enc = Encoder::new(&self.encoder_config)?;
        enc.check_params(&self.encoder)?;
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, v: &ArrayD<f32>| {
            tensors.push(TensorEntry {
                name,
                shape: v.shape().to_vec(),
                offset,
            });
            offset += v.len();
            for &x in v.iter() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, v) in self.encoder.iter() {
            push(format!("{ENCODER_PREFIX}{name}"), v);
        }
        if let Some(head) = &self.head {
            push(HEAD_TENSOR.into(), &head.weight.clone().into_dyn());
        }
        let header = Header {
            stage: self.stage,
            epoch: self.epoch,
            encoder_config: self.encoder_config.clone(),
            train_config: self.train_config.clone(),
            speakers: self.label_map.speakers().to_vec(),
            label_map_hash: self.label_map.hash(),
            head: self.head.as_ref().map(|h| HeadMeta {
                scale: h.scale,
                label_smoothing: h.label_smoothing,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let mut out = Vec::with_capacity(9 + json.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {}", bytes[4])));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes
            .get(9..9 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::json(format!("{} header", path.display()), e))?;
        let data = &bytes[9 + hlen..];
        if data.len() % 4 != 0 {
            return Err(bad("tensor data is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let label_map = LabelMap::from_speakers(header.speakers.iter().map(String::as_str));
        if label_map.speakers() != header.speakers.as_slice()
            || label_map.hash() != header.label_map_hash
        {
            return Err(Error::LabelMap(format!(
                "{}: stored label map does not match its hash",
                path.display()
            )));
        }

        let mut encoder = ParamStore::new();
        let mut head_weight = None;
        let mut used = 0;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let slice = floats
                .get(t.offset..t.offset + n)
                .ok_or_else(|| bad(&format!("tensor {} runs past the data", t.name)))?;
            used += n;
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), slice.to_vec())
                .map_err(|e| bad(&e.to_string()))?;
            if t.name == HEAD_TENSOR {
                head_weight = Some(arr);
            } else if let Some(name) = t.name.strip_prefix(ENCODER_PREFIX) {
                encoder.insert(name, arr);
            } else {
                return Err(bad(&format!("unknown tensor {}", t.name)));
            }
        }
        if used != floats.len() {
            return Err(bad("unreferenced tensor data"));
        }
        let head = match (header.head, head_weight) {
            (Some(meta), Some(w)) => {
                let weight: Array2<f32> = w
                    .into_dimensionality()
                    .map_err(|_| bad("head weight is not 2-D"))?;
                if weight.nrows() != label_map.len() {
                    return Err(Error::LabelMap(format!(
                        "head has {} classes but the label map {}",
                        weight.nrows(),
                        label_map.len()
                    )));
                }
                Some(ClassifierHead {
                    weight,
                    scale: meta.scale,
                    label_smoothing: meta.label_smoothing,
                })
            }
            (None, None) => None,
            _ => return Err(bad("head metadata and head tensor disagree")),
        };
        let ck = Self {
            stage: header.stage,
            epoch: header.epoch,
            encoder_config: header.encoder_config,
            train_config: header.train_config,
            encoder,
            head,
            label_map,
        };
        ck.build_encoder()?;
        Ok(ck)
    }

    /// Evaluation-mode embeddings of every item in `data`, in storage order.
    pub fn embed(&self, data: &Dataset, batch_size: usize) -> Result<Array2<f32>> {
        let enc = self.build_encoder()?;
        embed_dataset(&enc, &self.encoder, data, batch_size)
    }

    /// Predicted labels of every item in `data`.
    pub fn predict(&self, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("checkpoint has no classifier head".into()))?;
        head.predict(&self.embed(data, batch_size)?)
    }
}

pub(crate) fn embed_dataset(
    enc: &Encoder,
    params: &ParamStore<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((data.len(), enc.config().embed_dim));
    let mut row = 0;
    for b in data.batches(batch_size.max(1), None) {
        let e = encode(enc, params, &b.sequences, &b.mask)?;
        out.slice_mut(ndarray::s![row..row + e.nrows(), ..])
            .assign(&e);
        row += e.nrows();
    }
    Ok(out)
}
