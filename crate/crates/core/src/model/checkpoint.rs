//! JSON checkpoints: a version, the model config and a flat list of named
//! float arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForecastModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &ForecastModel) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            params: model
                .names()
                .iter()
                .zip(model.params())
                .map(|(n, t)| NamedArray {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<ForecastModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let named = self
            .params
            .into_iter()
            .map(|a| {
                let t = Tensor::new(a.shape, a.data)
                    .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", a.name)))?;
                Ok((a.name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        ForecastModel::from_params(&self.config, named)
    }
}

pub fn save(model: &ForecastModel, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string(&Checkpoint::from_model(model))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ForecastModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_model()
}
