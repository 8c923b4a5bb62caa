//! Binary checkpoints: `BMCK`, a version word, a length-prefixed JSON
//! header, then every tensor in parameter order as `f32` LE.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::write_file;
use crate::model::{Model, ModelConfig};
use crate::numeric::Tensor;
use crate::params::Params;

const MAGIC: &[u8; 4] = b"BMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    /// Free-form context such as the training config.
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: self.model.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |why: String| Error::format(path, why);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        if word(1) != CHECKPOINT_VERSION as usize {
            return Err(bad(format!("checkpoint version {} (expected {})", word(1), CHECKPOINT_VERSION)));
        }
        let end = 12 + word(2);
        if bytes.len() < end {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..end]).map_err(|e| bad(e.to_string()))?;
        header.config.validate()?;
        let total: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if bytes.len() != end + 4 * total {
            return Err(bad(format!("{} weight bytes, expected {}", bytes.len() - end, 4 * total)));
        }
        let mut params = Params::new();
        let mut pos = end;
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let data = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        let fresh = Model::init(header.config.clone(), 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(bad("weights do not match the model config".into()));
        }
        Ok(Checkpoint {
            model: Model {
                config: header.config,
                params,
            },
            step: header.step,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}
