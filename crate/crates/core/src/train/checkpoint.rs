use std::path::Path;

use serde::{Deserialize, Serialize};

use super::driver::TrainConfig;
use crate::cnn::{CnnConfig, CnnModel};
use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, GnnModel};
use crate::tensor::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::tensor::{NamedTensors, ParamSet, Tensor};

/// Reserved tensor name carrying the JSON metadata, one byte per element.
pub const META_TENSOR: &str = "__meta__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Cnn(CnnConfig),
    Gnn(GnnConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
}

/// Trained parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn from_cnn(model: &CnnModel, train: &TrainConfig, epoch: usize) -> Self {
        let meta = CheckpointMeta { model: ModelConfig::Cnn(model.config.clone()), train: train.clone(), seed: train.seed, epoch };
        Checkpoint { meta, params: model.params.clone() }
    }

    pub fn from_gnn(model: &GnnModel, train: &TrainConfig, epoch: usize) -> Self {
        let meta = CheckpointMeta { model: ModelConfig::Gnn(model.config.clone()), train: train.clone(), seed: train.seed, epoch };
        Checkpoint { meta, params: model.params.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: NamedTensors = self.params.to_named();
        let json = serde_json::to_vec(&self.meta)?;
        let meta = Tensor::new(&[json.len()], json.into_iter().map(f32::from).collect())?;
        if named.insert(META_TENSOR.to_owned(), meta).is_some() {
            return Err(Error::invalid(format!("parameter name {META_TENSOR} is reserved")));
        }
        encode_checkpoint(&named)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let named = decode_checkpoint(buf)?;
        let raw = named.get(META_TENSOR).ok_or_else(|| Error::format("checkpoint", "no metadata tensor"))?;
        let bytes = raw
            .data()
            .iter()
            .map(|&v| {
                let b = v as u8;
                if f32::from(b) == v {
                    Ok(b)
                } else {
                    Err(Error::format("checkpoint", "metadata tensor holds a non-byte value"))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
        let specs = match &meta.model {
            ModelConfig::Cnn(c) => {
                c.validate()?;
                c.param_specs()
            }
            ModelConfig::Gnn(g) => {
                g.validate()?;
                g.param_specs()
            }
        };
        if named.len() != specs.len() + 1 {
            return Err(Error::format("checkpoint", format!("{} tensors for a model with {}", named.len() - 1, specs.len())));
        }
        let params = ParamSet::from_named(specs, &named)?;
        Ok(Checkpoint { meta, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn into_cnn(self) -> Result<CnnModel> {
        match self.meta.model {
            ModelConfig::Cnn(c) => CnnModel::from_params(c, self.params),
            ModelConfig::Gnn(_) => Err(Error::invalid("checkpoint holds a graph network, not a CNN")),
        }
    }

    pub fn into_gnn(self) -> Result<GnnModel> {
        match self.meta.model {
            ModelConfig::Gnn(g) => GnnModel::from_params(g, self.params),
            ModelConfig::Cnn(_) => Err(Error::invalid("checkpoint holds a CNN, not a graph network")),
        }
    }
}
