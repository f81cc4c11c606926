//! Self-checks shared by the command line and the test suites: gradient
//! checks of layers and models, recurrent/parallel kernel agreement and
//! parameter parity between AR and ARMA models.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arma::tape::arma_attention;
use crate::arma::{ArmaConfig, AttnWeights};
use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::kernels::{parallel, recurrent, AttnKind, AttnVariant};
use crate::model::{build_model, ForecastModel, ModelConfig};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

pub fn random_attn_weights(cfg: &ArmaConfig, n_max: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<AttnWeights<Tensor>> {
    AttnWeights::assemble(cfg, n_max, |slot| Ok(Tensor::randn(&slot.shape, std, rng)))
}

/// Finite-difference check of one attention layer with respect to its input
/// and every weight at once (`N = 5`, `d = 8`, two heads where allowed).
pub fn layer_grad_check(kind: AttnKind, ma_enabled: bool, seed: u64) -> Result<GradCheckReport> {
    let (n, d) = (5, 8);
    let variant = AttnVariant::new(kind, d, 2)?;
    let cfg = if ma_enabled {
        ArmaConfig::new(variant)
    } else {
        ArmaConfig::ar_only(variant)
    };
    let mut rng = rng::stream(seed, Stream::Init);
    let w = random_attn_weights(&cfg, n, 0.4, &mut rng)?;
    let x = Tensor::randn(&[1, n, d], 1.0, &mut rng);
    let probe = Tensor::randn(&[1, n, d], 1.0, &mut rng);

    let mut flat: Vec<f64> = x.data().to_vec();
    let mut off = flat.len();
    let spans = w.map(|t| {
        flat.extend_from_slice(t.data());
        let span = (off, t.shape().to_vec());
        off += t.numel();
        span
    });
    let total = flat.len();
    let point = Tensor::new(vec![total], flat)?;
    grad_check(
        |tape: &mut Tape, p: Var| {
            let xs = tape.slice(p, 0, 0, n * d)?;
            let xv = tape.reshape(xs, &[1, n, d])?;
            let wv = spans.try_map(|(o, shape)| {
                let len: usize = shape.iter().product();
                let s = tape.slice(p, 0, *o, o + len)?;
                tape.reshape(s, shape)
            })?;
            let y = arma_attention(tape, xv, &wv, &cfg, None)?;
            let y = tape.mul_const(y, probe.clone())?;
            tape.sum(y)
        },
        &point,
        GRAD_CHECK_STEP,
        GRAD_CHECK_TOL,
    )
}

/// Small one-layer model (`d = 8`, `L_P = 4`, four tokens) with parameters
/// drawn large enough that gradients are far from zero.
pub fn small_model(kind: AttnKind, ma_enabled: bool, seed: u64) -> Result<ForecastModel> {
    let mut cfg = ModelConfig::with_dims(kind, 1, 2, 8, 4)?;
    cfg.max_tokens = 4;
    cfg.dropout = 0.0;
    cfg.attn.ma_enabled = ma_enabled;
    let base = build_model(&cfg, seed)?;
    let mut rng = rng::stream(seed, Stream::Data);
    let named = base
        .names()
        .iter()
        .zip(base.params())
        .map(|(name, p)| {
            let mut t = Tensor::randn(p.shape(), 0.3, &mut rng);
            if name.ends_with("scale") {
                t = t.map(|x| 1.0 + x);
            }
            (name.clone(), t)
        })
        .collect();
    ForecastModel::from_params(&cfg, named)
}

/// End-to-end check of the next-patch MSE of a [`small_model`] with respect
/// to all of its parameters.
pub fn model_grad_check(kind: AttnKind, ma_enabled: bool, seed: u64) -> Result<GradCheckReport> {
    let model = small_model(kind, ma_enabled, seed)?;
    let mut rng = rng::stream(seed, Stream::Shuffle);
    let tokens = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
    let targets = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
    grad_check(
        |tape: &mut Tape, flat: Var| {
            let p = model.unflatten(tape, flat)?;
            let x = tape.constant(tokens.clone())?;
            let y = model.forward(tape, &p, x, None)?;
            let t = tape.constant(targets.clone())?;
            tape.mse(y, t)
        },
        &model.flat_params(),
        GRAD_CHECK_STEP,
        GRAD_CHECK_TOL,
    )
}

#[derive(Clone, Debug)]
pub struct Equivalence {
    pub kind: AttnKind,
    pub max_rel_err: f64,
    pub parallel: Duration,
    pub recurrent: Duration,
}

/// Runs both forms of one AR kernel on random inputs and compares them.
pub fn kernel_equivalence(kind: AttnKind, n: usize, d: usize, heads: usize, seed: u64) -> Result<Equivalence> {
    let variant = AttnVariant::new(kind, d, heads)?;
    let h = variant.head_count;
    let mut rng = rng::stream(seed, Stream::Data);
    let q = Tensor::randn(&[n, d], 1.0, &mut rng);
    let k = Tensor::randn(&[n, d], 1.0, &mut rng);
    let v = Tensor::randn(&[n, d], 1.0, &mut rng);
    let g: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 6.0 - 2.0).collect();
    let w = Tensor::randn(&[n, n], 1.0, &mut rng);
    let t0 = Instant::now();
    let a = match kind {
        AttnKind::StdSoftmax => parallel::softmax_attn(&q, &k, &v, h)?,
        AttnKind::Linear => parallel::linear_attn(&q, &k, &v, h)?,
        AttnKind::ElementWise => parallel::elementwise_attn(&q, &k, &v)?,
        AttnKind::GatedLinear => parallel::gated_linear_attn(&q, &k, &v, &g, h)?,
        AttnKind::Fixed => parallel::fixed_attn(&w, &v)?,
    };
    let t1 = Instant::now();
    let b = match kind {
        AttnKind::StdSoftmax => recurrent::softmax_attn(&q, &k, &v, h)?,
        AttnKind::Linear => recurrent::linear_attn(&q, &k, &v, h)?,
        AttnKind::ElementWise => recurrent::elementwise_attn(&q, &k, &v)?,
        AttnKind::GatedLinear => recurrent::gated_linear_attn(&q, &k, &v, &g, h)?,
        AttnKind::Fixed => recurrent::fixed_attn(&w, &v)?,
    };
    let t2 = Instant::now();
    Ok(Equivalence {
        kind,
        max_rel_err: b.rel_err(&a),
        parallel: t1 - t0,
        recurrent: t2 - t1,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parity {
    pub kind: AttnKind,
    pub ar: usize,
    pub arma: usize,
}

/// Parameter counts of the AR and ARMA versions of `base` for every kind.
pub fn param_parity(base: &ModelConfig, heads: usize) -> Result<Vec<Parity>> {
    AttnKind::ALL
        .iter()
        .map(|&kind| {
            let variant = AttnVariant::new(kind, base.model_dim, heads)?;
            let count = |ma: bool| -> Result<usize> {
                let mut c = base.clone();
                c.attn.variant = variant;
                c.attn.ma_enabled = ma;
                Ok(build_model(&c, 0)?.param_count())
            };
            Ok(Parity {
                kind,
                ar: count(false)?,
                arma: count(true)?,
            })
        })
        .collect()
}
