//! ARMA attention: an autoregressive attention output plus a moving-average
//! term computed by attending over one-step residuals.
//!
//! The plain functions here work on single `N × d` sequences and use the
//! recurrent kernels. [`tape`] holds the batched, differentiable version used
//! for training; the two are tested against each other.

pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{recurrent, AttnKind, AttnVariant, RecurrentState};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmaConfig {
    pub variant: AttnVariant,
    /// Key activation scale inside the sigmoid.
    pub alpha: f64,
    /// Negative slope of the query activation.
    pub leaky_slope: f64,
    /// Reuse `W_q` for the MA query.
    pub share_wq: bool,
    /// Feed `X` directly as values in the ARMA layer (no `W_v`).
    pub wv_identity: bool,
    /// Ablation switch. Off gives the plain AR layer with its own `W_v`.
    pub ma_enabled: bool,
}

impl ArmaConfig {
    pub fn new(variant: AttnVariant) -> Self {
        ArmaConfig {
            variant,
            alpha: DEFAULT_ALPHA,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            share_wq: true,
            wv_identity: true,
            ma_enabled: true,
        }
    }

    pub fn ar_only(variant: AttnVariant) -> Self {
        ArmaConfig {
            ma_enabled: false,
            ..ArmaConfig::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope must be in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Heads used by the MA term: the fixed variant's tables act as one head.
    pub fn ma_heads(&self) -> usize {
        self.variant.head_count
    }

    fn has_wv(&self) -> bool {
        self.variant.kind != AttnKind::Fixed && !(self.ma_enabled && self.wv_identity)
    }
}

/// Attention parameters of one layer. Which entries exist depends on the
/// variant and on the ARMA switches; see [`AttnWeights::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights<T> {
    pub w_q: Option<T>,
    pub w_q_ma: Option<T>,
    /// AR key projection.
    pub w_k: Option<T>,
    pub w_k_ma: Option<T>,
    pub w_v: Option<T>,
    pub w_o: T,
    pub w_g: Option<T>,
    pub w_fixed: Option<T>,
    pub w_ma_q: Option<T>,
    pub w_ma_k: Option<T>,
}

/// One named parameter slot: name, shape and whether it is an output
/// projection (which gets the depth-scaled init).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub out_proj: bool,
}

impl<T> AttnWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttnWeights<U> {
        AttnWeights {
            w_q: self.w_q.as_ref().map(&mut f),
            w_q_ma: self.w_q_ma.as_ref().map(&mut f),
            w_k: self.w_k.as_ref().map(&mut f),
            w_k_ma: self.w_k_ma.as_ref().map(&mut f),
            w_v: self.w_v.as_ref().map(&mut f),
            w_o: f(&self.w_o),
            w_g: self.w_g.as_ref().map(&mut f),
            w_fixed: self.w_fixed.as_ref().map(&mut f),
            w_ma_q: self.w_ma_q.as_ref().map(&mut f),
            w_ma_k: self.w_ma_k.as_ref().map(&mut f),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<AttnWeights<U>> {
        fn opt<T, U>(x: &Option<T>, f: &mut impl FnMut(&T) -> Result<U>) -> Result<Option<U>> {
            x.as_ref().map(f).transpose()
        }
        let w_q = opt(&self.w_q, &mut f)?;
        let w_q_ma = opt(&self.w_q_ma, &mut f)?;
        let w_k = opt(&self.w_k, &mut f)?;
        let w_k_ma = opt(&self.w_k_ma, &mut f)?;
        let w_v = opt(&self.w_v, &mut f)?;
        let w_o = f(&self.w_o)?;
        Ok(AttnWeights {
            w_q,
            w_q_ma,
            w_k,
            w_k_ma,
            w_v,
            w_o,
            w_g: opt(&self.w_g, &mut f)?,
            w_fixed: opt(&self.w_fixed, &mut f)?,
            w_ma_q: opt(&self.w_ma_q, &mut f)?,
            w_ma_k: opt(&self.w_ma_k, &mut f)?,
        })
    }

    /// Parameter slots, in storage order.
    pub fn layout(cfg: &ArmaConfig, n_max: usize) -> Vec<Slot> {
        let d = cfg.variant.model_dim();
        let slot = |name, shape: &[usize]| Slot {
            name,
            shape: shape.to_vec(),
            out_proj: false,
        };
        let mut s = Vec::new();
        if cfg.variant.kind == AttnKind::Fixed {
            s.push(slot("w_fixed", &[n_max, n_max]));
            if cfg.ma_enabled {
                s.push(slot("w_ma_q", &[n_max, d]));
                s.push(slot("w_ma_k", &[n_max, d]));
            }
        } else {
            s.push(slot("w_q", &[d, d]));
            if cfg.ma_enabled && !cfg.share_wq {
                s.push(slot("w_q_ma", &[d, d]));
            }
            s.push(slot(if cfg.ma_enabled { "w_k_ar" } else { "w_k" }, &[d, d]));
            if cfg.ma_enabled {
                s.push(slot("w_k_ma", &[d, d]));
            }
            if cfg.has_wv() {
                s.push(slot("w_v", &[d, d]));
            }
            if cfg.variant.kind == AttnKind::GatedLinear {
                s.push(slot("w_g", &[d, 1]));
            }
        }
        s.push(Slot {
            name: "w_o",
            shape: vec![d, d],
            out_proj: true,
        });
        s
    }

    /// Builds the weight set by asking `get` for every slot of the layout.
    pub fn assemble(
        cfg: &ArmaConfig,
        n_max: usize,
        mut get: impl FnMut(&Slot) -> Result<T>,
    ) -> Result<Self> {
        let mut got: Vec<(&'static str, T)> = Vec::new();
        for slot in Self::layout(cfg, n_max) {
            let name = if slot.name == "w_k_ar" { "w_k" } else { slot.name };
            got.push((name, get(&slot)?));
        }
        let mut take = |name: &str| {
            got.iter()
                .position(|(n, _)| *n == name)
                .map(|i| got.swap_remove(i).1)
        };
        Ok(AttnWeights {
            w_q: take("w_q"),
            w_q_ma: take("w_q_ma"),
            w_k: take("w_k"),
            w_k_ma: take("w_k_ma"),
            w_v: take("w_v"),
            w_o: take("w_o").expect("layout always has w_o"),
            w_g: take("w_g"),
            w_fixed: take("w_fixed"),
            w_ma_q: take("w_ma_q"),
            w_ma_k: take("w_ma_k"),
        })
    }
}

fn need<'a, T>(w: &'a Option<T>, name: &str) -> Result<&'a T> {
    w.as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("attention weight `{name}` missing")))
}

/// `φ_q(q) = -LeakyReLU(-q/√d)`, with `d` the column count.
pub fn phi_q_ma(q: &Tensor, slope: f64) -> Tensor {
    let s = 1.0 / (q.cols() as f64).sqrt();
    q.map(|x| {
        let u = -x * s;
        -(if u >= 0.0 { u } else { slope * u })
    })
}

/// `φ_k(k) = σ(α k/√d)`, with `d` the column count.
pub fn phi_k_ma(k: &Tensor, alpha: f64) -> Tensor {
    let s = alpha / (k.cols() as f64).sqrt();
    k.map(|x| crate::autodiff::sigmoid(s * x))
}

/// `r_j = v_{j+1} - o^AR_j`, one row shorter than the inputs.
pub fn token_shift_residual(v: &Tensor, o_ar: &Tensor) -> Result<Tensor> {
    if v.rank() != 2 || v.shape() != o_ar.shape() {
        return Err(Error::shape(
            "token shift",
            format!("v {:?}, o_ar {:?}", v.shape(), o_ar.shape()),
        ));
    }
    let n = v.rows();
    if n < 1 {
        return Err(Error::EmptySequence);
    }
    v.rows_range(1, n).zip_map(&o_ar.rows_range(0, n - 1), |a, b| a - b)
}

/// MA output by the linear recurrence
/// `o_t = φ_q(q_{t-1}) Σ_{j<t} φ_k(k_j)ᵀ r_j / head_dim`; row 0 is zero.
///
/// The per-head inner product is averaged over the head's channels.
pub fn ma_output(q_ma: &Tensor, k_ma: &Tensor, r: &Tensor, heads: usize, cfg: &ArmaConfig) -> Result<Tensor> {
    if q_ma.rank() != 2 || q_ma.shape() != k_ma.shape() {
        return Err(Error::shape(
            "ma_output",
            format!("q {:?}, k {:?}", q_ma.shape(), k_ma.shape()),
        ));
    }
    let (n, d) = (q_ma.rows(), q_ma.cols());
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if r.rank() != 2 || r.rows() + 1 != n || r.cols() != d {
        return Err(Error::shape(
            "ma_output",
            format!("residual {:?} for {n} steps of width {d}", r.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("ma_output", format!("d = {d} with {heads} heads")));
    }
    let hd = d / heads;
    let pq = phi_q_ma(q_ma, cfg.leaky_slope);
    let pk = phi_k_ma(k_ma, cfg.alpha);
    let mut state = RecurrentState::linear(heads, hd);
    let mut out = Tensor::zeros(&[n, d]);
    let inv = 1.0 / hd as f64;
    for t in 1..n {
        let o = state.step(pq.row(t - 1), pk.row(t - 1), r.row(t - 1), None)?;
        for (dst, x) in out.row_mut(t).iter_mut().zip(o) {
            *dst = x * inv;
        }
    }
    Ok(out)
}

/// AR output of the variant on values `v`.
fn ar_output(x: &Tensor, q: Option<&Tensor>, k: Option<&Tensor>, v: &Tensor, w: &AttnWeights<Tensor>, cfg: &ArmaConfig) -> Result<Tensor> {
    let h = cfg.variant.head_count;
    let (q, k) = match cfg.variant.kind {
        AttnKind::Fixed => {
            return recurrent::fixed_attn(need(&w.w_fixed, "w_fixed")?, v);
        }
        _ => (q.expect("q"), k.expect("k")),
    };
    match cfg.variant.kind {
        AttnKind::StdSoftmax => recurrent::softmax_attn(q, k, v, h),
        AttnKind::Linear => recurrent::linear_attn(q, k, v, h),
        AttnKind::ElementWise => recurrent::elementwise_attn(q, k, v),
        AttnKind::GatedLinear => {
            let g = x.matmul(need(&w.w_g, "w_g")?)?;
            recurrent::gated_linear_attn(q, k, v, g.data(), h)
        }
        AttnKind::Fixed => unreachable!(),
    }
}

/// Full attention layer on one normalised sequence `x` (`N × d`), dropout off.
/// Returns `(O_ar + O_ma) W_o`.
pub fn arma_attention_layer(x: &Tensor, w: &AttnWeights<Tensor>, cfg: &ArmaConfig) -> Result<Tensor> {
    let parts = layer_parts(x, w, cfg)?;
    parts.o_ar.zip_map(&parts.o_ma, |a, b| a + b)?.matmul(&w.w_o)
}

/// Intermediate outputs of a layer, exposed for tests and analysis.
#[derive(Clone, Debug)]
pub struct LayerParts {
    pub q_ma: Option<Tensor>,
    pub k_ma: Option<Tensor>,
    pub v: Tensor,
    pub o_ar: Tensor,
    pub o_ma: Tensor,
}

pub fn layer_parts(x: &Tensor, w: &AttnWeights<Tensor>, cfg: &ArmaConfig) -> Result<LayerParts> {
    let d = cfg.variant.model_dim();
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::shape("attention layer", format!("input {:?}, d = {d}", x.shape())));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let fixed = cfg.variant.kind == AttnKind::Fixed;
    let v = match &w.w_v {
        Some(wv) => x.matmul(wv)?,
        None => x.clone(),
    };
    let (q, k) = if fixed {
        (None, None)
    } else {
        (
            Some(x.matmul(need(&w.w_q, "w_q")?)?),
            Some(x.matmul(need(&w.w_k, "w_k")?)?),
        )
    };
    let o_ar = ar_output(x, q.as_ref(), k.as_ref(), &v, w, cfg)?;
    let mut parts = LayerParts {
        q_ma: None,
        k_ma: None,
        o_ma: Tensor::zeros(&[n, d]),
        v,
        o_ar,
    };
    if !cfg.ma_enabled {
        return Ok(parts);
    }
    let (q_ma, k_ma) = if fixed {
        let (tq, tk) = (need(&w.w_ma_q, "w_ma_q")?, need(&w.w_ma_k, "w_ma_k")?);
        if n > tq.rows() {
            return Err(Error::SequenceTooLong { len: n, max: tq.rows() });
        }
        (tq.rows_range(0, n), tk.rows_range(0, n))
    } else {
        let q_ma = match &w.w_q_ma {
            Some(wq) => x.matmul(wq)?,
            None => q.expect("q"),
        };
        (q_ma, x.matmul(need(&w.w_k_ma, "w_k_ma")?)?)
    };
    if n >= 2 {
        let r = token_shift_residual(&parts.v, &parts.o_ar)?;
        parts.o_ma = ma_output(&q_ma, &k_ma, &r, cfg.ma_heads(), cfg)?;
    }
    parts.q_ma = Some(q_ma);
    parts.k_ma = Some(k_ma);
    Ok(parts)
}
