//! Versioned JSON model files. Weights are stored as the hexadecimal bit
//! patterns of their `f64` values so a reloaded model evaluates
//! bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowConfig, FlowError, FlowModel, InitMode};
use crate::bijectors::Layer;
use crate::diffcore::{ParamStore, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "nflows-model";

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    bits: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    tool_version: String,
    config: FlowConfig,
    init: InitMode,
    seed: u64,
    layers: Vec<Layer>,
    params: Vec<StoredTensor>,
}

fn encode(t: &Tensor) -> StoredTensor {
    StoredTensor {
        shape: t.shape().to_vec(),
        bits: t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
    }
}

fn decode(s: StoredTensor) -> Result<Tensor, FlowError> {
    let data = s
        .bits
        .iter()
        .map(|h| {
            u64::from_str_radix(h, 16)
                .map(f64::from_bits)
                .map_err(|e| FlowError::Format(format!("bad weight {h:?}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::new(s.shape, data).map_err(|e| FlowError::Format(e.to_string()))
}

impl FlowModel {
    pub fn to_json(&self) -> Result<String, FlowError> {
        let file = ModelFile {
            format: FORMAT_NAME.into(),
            version: MODEL_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.clone(),
            init: self.init,
            seed: self.seed,
            layers: self.layers.clone(),
            params: self.store.tensors().iter().map(encode).collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| FlowError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, FlowError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| FlowError::Format(e.to_string()))?;
        if file.format != FORMAT_NAME {
            return Err(FlowError::Format(format!("not a model file ({:?})", file.format)));
        }
        if file.version != MODEL_FORMAT_VERSION {
            return Err(FlowError::Format(format!(
                "unsupported format version {}",
                file.version
            )));
        }
        file.config.validate()?;
        let mut store = ParamStore::new();
        for t in file.params {
            store.add(decode(t)?);
        }
        // Every parameter a layer references must exist with the right shape.
        for layer in &file.layers {
            if layer.dim() != file.config.dim {
                return Err(FlowError::Format("layer dimension mismatch".into()));
            }
            if let Some(net) = layer.net() {
                let widths = net.widths();
                for (i, (&w, &b)) in net.weights().iter().zip(net.biases()).enumerate() {
                    let ok = w.0 < store.len()
                        && b.0 < store.len()
                        && store.get(w).shape() == [widths[i], widths[i + 1]]
                        && store.get(b).shape() == [widths[i + 1]];
                    if !ok {
                        return Err(FlowError::Format(format!("layer {i} parameters missing")));
                    }
                }
            }
        }
        Ok(FlowModel::from_parts(
            file.config,
            file.init,
            file.seed,
            file.layers,
            store,
        ))
    }
}

pub fn save_model(model: &FlowModel, path: &Path) -> Result<(), FlowError> {
    std::fs::write(path, model.to_json()?).map_err(|source| FlowError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<FlowModel, FlowError> {
    let text = std::fs::read_to_string(path).map_err(|source| FlowError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    FlowModel::from_json(&text)
}
