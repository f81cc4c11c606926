//! Step-by-step forms. Each state consumes one token at a time and never
//! looks ahead, so causality holds by construction.

use super::{check_fixed, check_qkv, dot};
use crate::autodiff::{log_sigmoid, sigmoid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running state of one attention variant.
#[derive(Clone, Debug)]
pub enum RecurrentState {
    /// KV cache.
    Softmax {
        heads: usize,
        head_dim: usize,
        keys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
    },
    /// Per head `S = Σ k_iᵀ v_i`, stored `heads × hd × hd`.
    Linear { heads: usize, head_dim: usize, s: Vec<f64> },
    /// Per channel running max, numerator and denominator.
    ElementWise {
        max: Vec<f64>,
        num: Vec<f64>,
        den: Vec<f64>,
        started: bool,
    },
    /// Like `Linear`, plus the accumulated log of the cumulative gate.
    Gated {
        heads: usize,
        head_dim: usize,
        s: Vec<f64>,
        log_g: f64,
    },
    /// Value cache.
    Fixed { values: Vec<Vec<f64>> },
}

impl RecurrentState {
    pub fn softmax(heads: usize, head_dim: usize) -> Self {
        RecurrentState::Softmax {
            heads,
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn linear(heads: usize, head_dim: usize) -> Self {
        RecurrentState::Linear {
            heads,
            head_dim,
            s: vec![0.0; heads * head_dim * head_dim],
        }
    }

    pub fn elementwise(d: usize) -> Self {
        RecurrentState::ElementWise {
            max: vec![f64::NEG_INFINITY; d],
            num: vec![0.0; d],
            den: vec![0.0; d],
            started: false,
        }
    }

    pub fn gated(heads: usize, head_dim: usize) -> Self {
        RecurrentState::Gated {
            heads,
            head_dim,
            s: vec![0.0; heads * head_dim * head_dim],
            log_g: 0.0,
        }
    }

    pub fn fixed() -> Self {
        RecurrentState::Fixed { values: Vec::new() }
    }

    /// Consumes `(q_t, k_t, v_t)` and returns `o_t`.
    ///
    /// `gate_logit` is required by the gated state and ignored otherwise.
    /// Fixed attention has no query or key; use [`RecurrentState::step_fixed`].
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], gate_logit: Option<f64>) -> Result<Vec<f64>> {
        if q.len() != k.len() || q.len() != v.len() {
            return Err(Error::shape(
                "recurrent step",
                format!("q {}, k {}, v {}", q.len(), k.len(), v.len()),
            ));
        }
        match self {
            RecurrentState::Softmax {
                heads,
                head_dim,
                keys,
                values,
            } => {
                let hd = *head_dim;
                check_width(q.len(), *heads * hd)?;
                keys.push(k.to_vec());
                values.push(v.to_vec());
                let scale = 1.0 / (hd as f64).sqrt();
                let mut out = vec![0.0; q.len()];
                for h in 0..*heads {
                    let r = h * hd..(h + 1) * hd;
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|key| scale * dot(&q[r.clone()], &key[r.clone()]))
                        .collect();
                    if logits.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite { op: "softmax logits" });
                    }
                    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let mut den = 0.0;
                    for (l, val) in logits.iter().zip(values.iter()) {
                        let e = (l - mx).exp();
                        den += e;
                        for c in r.clone() {
                            out[c] += e * val[c];
                        }
                    }
                    for c in r {
                        out[c] /= den;
                    }
                }
                Ok(out)
            }
            RecurrentState::Linear { heads, head_dim, s } => {
                check_width(q.len(), *heads * *head_dim)?;
                Ok(outer_step(s, *heads, *head_dim, q, k, v, 1.0))
            }
            RecurrentState::Gated {
                heads,
                head_dim,
                s,
                log_g,
            } => {
                check_width(q.len(), *heads * *head_dim)?;
                let g = gate_logit.ok_or_else(|| {
                    Error::InvalidConfig("gated attention step needs a gate logit".into())
                })?;
                *log_g += log_sigmoid(g);
                Ok(outer_step(s, *heads, *head_dim, q, k, v, log_g.exp()))
            }
            RecurrentState::ElementWise {
                max,
                num,
                den,
                started,
            } => {
                check_width(q.len(), max.len())?;
                let mut out = vec![0.0; q.len()];
                for c in 0..q.len() {
                    if !*started || k[c] > max[c] {
                        let m_new = k[c];
                        let r = if *started { (max[c] - m_new).exp() } else { 0.0 };
                        num[c] *= r;
                        den[c] *= r;
                        max[c] = m_new;
                    }
                    let e = (k[c] - max[c]).exp();
                    num[c] += e * v[c];
                    den[c] += e;
                    out[c] = sigmoid(q[c]) * num[c] / den[c];
                }
                *started = true;
                Ok(out)
            }
            RecurrentState::Fixed { .. } => Err(Error::InvalidConfig(
                "fixed attention steps take a weight row, not q/k".into(),
            )),
        }
    }

    /// Fixed attention step: `w_row` holds `w_{t,0..=t}`.
    pub fn step_fixed(&mut self, w_row: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let RecurrentState::Fixed { values } = self else {
            return Err(Error::InvalidConfig("step_fixed on a non-fixed state".into()));
        };
        values.push(v.to_vec());
        if w_row.len() < values.len() {
            return Err(Error::shape(
                "fixed step",
                format!("{} weights for step {}", w_row.len(), values.len() - 1),
            ));
        }
        let mut out = vec![0.0; v.len()];
        for (w, val) in w_row.iter().zip(values.iter()) {
            for (o, x) in out.iter_mut().zip(val) {
                *o += w * x;
            }
        }
        Ok(out)
    }
}

fn check_width(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape("recurrent step", format!("width {got}, state expects {want}")));
    }
    Ok(())
}

/// `S += g · kᵀ v` then `o = q S`, per head.
fn outer_step(s: &mut [f64], heads: usize, hd: usize, q: &[f64], k: &[f64], v: &[f64], g: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    for h in 0..heads {
        let off = h * hd;
        let sh = &mut s[h * hd * hd..(h + 1) * hd * hd];
        for a in 0..hd {
            let ka = g * k[off + a];
            for b in 0..hd {
                sh[a * hd + b] += ka * v[off + b];
            }
        }
        for a in 0..hd {
            let qa = q[off + a];
            for b in 0..hd {
                out[off + b] += qa * sh[a * hd + b];
            }
        }
    }
    out
}

fn run(mut state: RecurrentState, q: &Tensor, k: &Tensor, v: &Tensor, gates: Option<&[f64]>) -> Result<Tensor> {
    let n = q.rows();
    let mut out = Tensor::zeros(q.shape());
    for t in 0..n {
        let o = state.step(q.row(t), k.row(t), v.row(t), gates.map(|g| g[t]))?;
        out.row_mut(t).copy_from_slice(&o);
    }
    Ok(out)
}

pub fn softmax_attn(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, hd) = check_qkv(q, k, v, heads)?;
    run(RecurrentState::softmax(heads, hd), q, k, v, None)
}

pub fn linear_attn(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, hd) = check_qkv(q, k, v, heads)?;
    run(RecurrentState::linear(heads, hd), q, k, v, None)
}

pub fn elementwise_attn(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v, 1)?;
    run(RecurrentState::elementwise(q.cols()), q, k, v, None)
}

pub fn gated_linear_attn(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gate_logits: &[f64],
    heads: usize,
) -> Result<Tensor> {
    let (n, hd) = check_qkv(q, k, v, heads)?;
    if gate_logits.len() != n {
        return Err(Error::shape(
            "gated attention",
            format!("{} gate logits for {n} steps", gate_logits.len()),
        ));
    }
    run(RecurrentState::gated(heads, hd), q, k, v, Some(gate_logits))
}

pub fn fixed_attn(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    let n = check_fixed(w, v)?;
    let mut state = RecurrentState::fixed();
    let mut out = Tensor::zeros(v.shape());
    for t in 0..n {
        let o = state.step_fixed(&w.row(t)[..=t], v.row(t))?;
        out.row_mut(t).copy_from_slice(&o);
    }
    Ok(out)
}
