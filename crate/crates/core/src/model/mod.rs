//! Decoder-only patch forecaster: patch embedding with learned positions,
//! pre-norm ARMA-attention blocks with GELU MLPs, a final norm and a linear
//! head predicting the next patch at every position.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::arma::tape::arma_attention;
use crate::arma::{ArmaConfig, AttnWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{AttnKind, AttnVariant};
use crate::rng::{self, Dropout, Stream};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_MAX_TOKENS: usize = 64;

/// `round(16 √C)` rounded up to a multiple of `heads`.
pub fn model_dim_for(channels: usize, heads: usize) -> usize {
    let base = (16.0 * (channels as f64).sqrt()).round() as usize;
    let heads = heads.max(1);
    base.max(1).div_ceil(heads) * heads
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub patch_len: usize,
    pub max_tokens: usize,
    pub attn: ArmaConfig,
}

impl ModelConfig {
    /// Defaults: 3 layers, 8 heads, `d` from the channel count, dropout 0.1.
    pub fn new(kind: AttnKind, channels: usize, patch_len: usize) -> Result<Self> {
        Self::with_dims(kind, 3, 8, model_dim_for(channels, 8), patch_len)
    }

    pub fn with_dims(kind: AttnKind, num_layers: usize, heads: usize, d: usize, patch_len: usize) -> Result<Self> {
        let cfg = ModelConfig {
            num_layers,
            heads,
            model_dim: d,
            mlp_hidden: 4 * d,
            dropout: 0.1,
            patch_len,
            max_tokens: DEFAULT_MAX_TOKENS,
            attn: ArmaConfig::new(AttnVariant::new(kind, d, heads)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.mlp_hidden != 4 * self.model_dim {
            return bad(format!("mlp_hidden must be 4 * model_dim = {}", 4 * self.model_dim));
        }
        if self.attn.variant.model_dim() != self.model_dim {
            return bad("attention variant width differs from model_dim".into());
        }
        if self.patch_len == 0 || self.max_tokens == 0 {
            return bad("patch_len and max_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        self.attn.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    OutProj,
    Zero,
    One,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    attn_norm: usize,
    attn: AttnWeights<usize>,
    mlp_norm: usize,
    w_in: usize,
    b_in: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    proj_w: usize,
    proj_b: usize,
    pos: usize,
    embed_norm: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            proj_w: 0,
            proj_b: 0,
            pos: 0,
            embed_norm: 0,
            layers: Vec::new(),
            final_norm: 0,
            head_w: 0,
            head_b: 0,
        };
        let (d, lp, h) = (cfg.model_dim, cfg.patch_len, cfg.mlp_hidden);
        l.proj_w = l.push("embed.proj.weight".into(), &[lp, d], Init::Normal);
        l.proj_b = l.push("embed.proj.bias".into(), &[d], Init::Zero);
        l.pos = l.push("embed.pos".into(), &[cfg.max_tokens, d], Init::Normal);
        l.embed_norm = l.push("embed.norm.scale".into(), &[d], Init::One);
        for i in 0..cfg.num_layers {
            let attn_norm = l.push(format!("layer{i}.attn_norm.scale"), &[d], Init::One);
            let attn = AttnWeights::assemble(&cfg.attn, cfg.max_tokens, |s| {
                let init = if s.out_proj { Init::OutProj } else { Init::Normal };
                Ok(l.push(format!("layer{i}.attn.{}", s.name), &s.shape, init))
            })?;
            let mlp_norm = l.push(format!("layer{i}.mlp_norm.scale"), &[d], Init::One);
            let w_in = l.push(format!("layer{i}.mlp.w_in"), &[d, h], Init::Normal);
            let b_in = l.push(format!("layer{i}.mlp.b_in"), &[h], Init::Zero);
            let w_out = l.push(format!("layer{i}.mlp.w_out"), &[h, d], Init::OutProj);
            let b_out = l.push(format!("layer{i}.mlp.b_out"), &[d], Init::Zero);
            l.layers.push(LayerIdx {
                attn_norm,
                attn,
                mlp_norm,
                w_in,
                b_in,
                w_out,
                b_out,
            });
        }
        l.final_norm = l.push("final_norm.scale".into(), &[d], Init::One);
        l.head_w = l.push("head.weight".into(), &[d, lp], Init::Normal);
        l.head_b = l.push("head.bias".into(), &[lp], Init::Zero);
        Ok(l)
    }

    fn push(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct ForecastModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
}

/// Builds a model with GPT-2 style init from the seed's init stream.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ForecastModel> {
    config.validate()?;
    let layout = Layout::new(config)?;
    let mut rng = rng::stream(seed, Stream::Init);
    let out_std = INIT_STD / (config.num_layers as f64).sqrt();
    let params = layout
        .shapes
        .iter()
        .zip(&layout.inits)
        .map(|(shape, init)| match init {
            Init::Normal => Tensor::randn(shape, INIT_STD, &mut rng),
            Init::OutProj => Tensor::randn(shape, out_std, &mut rng),
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::full(shape, 1.0),
        })
        .collect();
    Ok(ForecastModel {
        config: config.clone(),
        layout,
        params,
    })
}

impl ForecastModel {
    /// Rebuilds from named parameters, checking names and shapes.
    pub fn from_params(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config)?;
        if named.len() != layout.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match `{want}` {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
            params.push(t);
        }
        Ok(ForecastModel {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on the tape.
    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// All parameters concatenated in storage order.
    pub fn flat_params(&self) -> Tensor {
        let data: Vec<f64> = self.params.iter().flat_map(|p| p.data().iter().copied()).collect();
        let n = data.len();
        Tensor::new(vec![n], data).expect("flat length")
    }

    /// Cuts a flat vector on the tape back into parameter-shaped pieces.
    pub fn unflatten(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Var>> {
        let mut off = 0;
        let mut out = Vec::with_capacity(self.params.len());
        for shape in &self.layout.shapes {
            let n: usize = shape.iter().product();
            let s = tape.slice(flat, 0, off, off + n)?;
            out.push(tape.reshape(s, shape)?);
            off += n;
        }
        Ok(out)
    }

    fn norm(&self, tape: &mut Tape, x: Var, scale: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let n = tape.rms_norm(x)?;
        let s = tape.broadcast(scale, &shape)?;
        tape.mul(n, s)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let shape = tape.shape(y).to_vec();
        let b = tape.broadcast(b, &shape)?;
        tape.add(y, b)
    }

    /// Next-patch predictions `[M, N, L_P]` for tokens `[M, N, L_P]`, each of
    /// the `M` rows an independent channel sequence.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], tokens: Var, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        let l = &self.layout;
        if p.len() != l.names.len() {
            return Err(Error::shape("forward", format!("{} parameter handles", p.len())));
        }
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.config.patch_len {
            return Err(Error::shape(
                "forward",
                format!("tokens {s:?}, patch length {}", self.config.patch_len),
            ));
        }
        let (m, n) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if n > self.config.max_tokens {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_tokens,
            });
        }
        let d = self.config.model_dim;
        let mut x = self.linear(tape, tokens, p[l.proj_w], p[l.proj_b])?;
        let pos = tape.slice(p[l.pos], 0, 0, n)?;
        let pos = tape.broadcast(pos, &[m, n, d])?;
        x = tape.add(x, pos)?;
        x = self.norm(tape, x, p[l.embed_norm])?;
        for layer in &l.layers {
            let h = self.norm(tape, x, p[layer.attn_norm])?;
            let w = layer.attn.map(|&i| p[i]);
            let a = arma_attention(tape, h, &w, &self.config.attn, dropout.as_deref_mut())?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, p[layer.mlp_norm])?;
            let h = self.linear(tape, h, p[layer.w_in], p[layer.b_in])?;
            let mut h = tape.gelu(h)?;
            if let Some(dr) = dropout.as_deref_mut() {
                h = dr.apply(tape, h)?;
            }
            let h = self.linear(tape, h, p[layer.w_out], p[layer.b_out])?;
            x = tape.add(x, h)?;
        }
        let x = self.norm(tape, x, p[l.final_norm])?;
        self.linear(tape, x, p[l.head_w], p[l.head_b])
    }

    /// Inference without dropout; returns `[M, N, L_P]`.
    pub fn predict(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.load(&mut tape, false)?;
        let x = tape.constant(tokens.clone())?;
        let y = self.forward(&mut tape, &p, x, None)?;
        Ok(tape.value(y).clone())
    }

    /// Last-position forecast, `[M, L_P]`.
    pub fn forecast(&self, tokens: &Tensor) -> Result<Tensor> {
        let y = self.predict(tokens)?;
        let s = y.shape().to_vec();
        let (m, n, lp) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(m * lp);
        for i in 0..m {
            let off = (i * n + n - 1) * lp;
            out.extend_from_slice(&y.data()[off..off + lp]);
        }
        Tensor::new(vec![m, lp], out)
    }
}
