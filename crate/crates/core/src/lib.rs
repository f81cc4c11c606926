//! ARMA attention for time-series forecasting.
//!
//! Autoregressive attention kernels extended with a moving-average term whose
//! weights are generated indirectly, a decoder-only patch forecaster built on
//! a small reverse-mode autodiff engine, and explicit-matrix oracles for the
//! implied MA weights.

pub mod arma;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod ma_analysis;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use arma::{ArmaConfig, AttnWeights};
pub use autodiff::{Tape, Var};
pub use config::RunConfig;
pub use data::{SeriesDataset, SplitPreset};
pub use error::{Error, Result};
pub use kernels::{AttnKind, AttnVariant};
pub use model::{build_model, ForecastModel, ModelConfig};
pub use tensor::Tensor;
pub use training::{evaluate, train, Metrics, TrainConfig};
