//! Run configuration: one JSON document with `data`, `model`, `arma`,
//! `train` sections and an output directory. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arma::{DEFAULT_ALPHA, DEFAULT_LEAKY_SLOPE};
use crate::data::synthetic::{gen_synthetic, SyntheticSpec};
use crate::data::{load_csv, split_standardize, token_layout, SeriesDataset, SplitPreset};
use crate::error::{Error, Result};
use crate::kernels::{AttnKind, AttnVariant};
use crate::model::{model_dim_for, ModelConfig, DEFAULT_MAX_TOKENS};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV file with a header row.
    pub source: Option<PathBuf>,
    /// Generated series, used when `source` is absent.
    pub synthetic: Option<SyntheticSpec>,
    #[serde(rename = "L_I")]
    pub l_i: usize,
    #[serde(rename = "L_P")]
    pub l_p: usize,
    pub preset: SplitPreset,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: None,
            synthetic: None,
            l_i: 512,
            l_p: 96,
            preset: SplitPreset::Generic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: AttnKind,
    pub num_layers: usize,
    pub heads: usize,
    /// `None` derives the width from the channel count.
    pub model_dim: Option<usize>,
    pub dropout: f64,
    pub max_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: AttnKind::Linear,
            num_layers: 3,
            heads: 8,
            model_dim: None,
            dropout: 0.1,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmaSection {
    pub ma_enabled: bool,
    pub alpha: f64,
    pub leaky_slope: f64,
    pub share_wq: bool,
    pub wv_identity: bool,
}

impl Default for ArmaSection {
    fn default() -> Self {
        ArmaSection {
            ma_enabled: true,
            alpha: DEFAULT_ALPHA,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            share_wq: true,
            wv_identity: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub arma: ArmaSection,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
}

fn at(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(m) => Error::InvalidConfig(format!("{section}: {m}")),
        other => other,
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::InvalidConfig(format!("{path}: {}", e.into_inner()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Model hyper-parameters for a dataset with `channels` series.
    pub fn model_config(&self, channels: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let d = m.model_dim.unwrap_or_else(|| model_dim_for(channels, m.heads));
        let variant = AttnVariant::new(m.kind, d, m.heads).map_err(|e| at("model", e))?;
        let mut attn = crate::arma::ArmaConfig::new(variant);
        attn.ma_enabled = self.arma.ma_enabled;
        attn.alpha = self.arma.alpha;
        attn.leaky_slope = self.arma.leaky_slope;
        attn.share_wq = self.arma.share_wq;
        attn.wv_identity = self.arma.wv_identity;
        attn.validate().map_err(|e| at("arma", e))?;
        let cfg = ModelConfig {
            num_layers: m.num_layers,
            heads: m.heads,
            model_dim: d,
            mlp_hidden: 4 * d,
            dropout: m.dropout,
            patch_len: self.data.l_p,
            max_tokens: m.max_tokens,
            attn,
        };
        cfg.validate().map_err(|e| at("model", e))?;
        Ok(cfg)
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| at("train", e))?;
        let (_, n) = token_layout(self.data.l_i, self.data.l_p).map_err(|e| at("data", e))?;
        if n > self.model.max_tokens {
            return Err(Error::InvalidConfig(format!(
                "data: L_I = {} and L_P = {} give {n} tokens, above model.max_tokens = {}",
                self.data.l_i, self.data.l_p, self.model.max_tokens
            )));
        }
        if self.data.source.is_some() && self.data.synthetic.is_some() {
            return Err(Error::InvalidConfig("data: set only one of `source` and `synthetic`".into()));
        }
        self.model_config(1).map(|_| ())
    }

    /// Loads or generates the series, then splits and standardises it.
    pub fn load_dataset(&self, seed: u64) -> Result<SeriesDataset> {
        let ds = match (&self.data.source, &self.data.synthetic) {
            (Some(p), None) => load_csv(p)?,
            (None, Some(spec)) => gen_synthetic(spec, seed)?,
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig("data: set only one of `source` and `synthetic`".into()))
            }
            (None, None) => {
                return Err(Error::InvalidConfig("data: one of `source` or `synthetic` is required".into()))
            }
        };
        split_standardize(ds, self.data.preset).map_err(|e| at("data", e))
    }
}
