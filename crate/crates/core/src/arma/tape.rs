//! Batched differentiable ARMA attention on `[B, N, d]` inputs.

use super::{need, ArmaConfig, AttnWeights};
use crate::autodiff::{Mask, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::AttnKind;
use crate::rng::Dropout;
use crate::tensor::Tensor;

/// Lower-triangular 0/1 mask; `strict` excludes the diagonal.
pub fn causal_mask(n: usize, strict: bool) -> Tensor {
    Tensor::from_fn2(n, n, |t, i| if i < t || (!strict && i == t) { 1.0 } else { 0.0 })
}

/// `[B, N, d]` to `[B, H, N, d/H]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, n, heads, d / heads])?;
    tape.transpose(r, 1, 2)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, n, hd) = (s[0], s[1], s[2], s[3]);
    let t = tape.transpose(x, 1, 2)?;
    tape.reshape(t, &[b, n, h * hd])
}

fn square_slice(tape: &mut Tape, w: Var, n: usize) -> Result<Var> {
    let rows = tape.shape(w)[0];
    if n > rows {
        return Err(Error::SequenceTooLong { len: n, max: rows });
    }
    let r = tape.slice(w, 0, 0, n)?;
    tape.slice(r, 1, 0, n)
}

/// Broadcasts an `[N, c]` table across the batch.
fn batch_table(tape: &mut Tape, w: Var, b: usize, n: usize) -> Result<Var> {
    let rows = tape.shape(w)[0];
    if n > rows {
        return Err(Error::SequenceTooLong { len: n, max: rows });
    }
    let c = tape.shape(w)[1];
    let t = tape.slice(w, 0, 0, n)?;
    tape.broadcast(t, &[b, n, c])
}

fn ar_output(tape: &mut Tape, x: Var, q: Option<Var>, k: Option<Var>, v: Var, w: &AttnWeights<Var>, cfg: &ArmaConfig) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n) = (s[0], s[1]);
    let h = cfg.variant.head_count;
    let hd = cfg.variant.head_dim;
    if cfg.variant.kind == AttnKind::Fixed {
        let wf = square_slice(tape, *need(&w.w_fixed, "w_fixed")?, n)?;
        let wf = tape.mul_const(wf, causal_mask(n, false))?;
        let wf = tape.broadcast(wf, &[b, n, n])?;
        return tape.matmul(wf, v);
    }
    let (q, k) = (q.expect("q"), k.expect("k"));
    match cfg.variant.kind {
        AttnKind::StdSoftmax | AttnKind::Linear | AttnKind::GatedLinear => {
            let qh = split_heads(tape, q, h)?;
            let mut kh = split_heads(tape, k, h)?;
            let vh = split_heads(tape, v, h)?;
            if cfg.variant.kind == AttnKind::GatedLinear {
                // Fold the cumulative gate G_i into k_i.
                let g = tape.matmul(x, *need(&w.w_g, "w_g")?)?;
                let g = tape.log_sigmoid(g)?;
                let g = tape.cumsum(g, 1)?;
                let g = tape.exp(g)?;
                let g = tape.reshape(g, &[b, 1, n, 1])?;
                let g = tape.broadcast(g, &[b, h, n, hd])?;
                kh = tape.mul(kh, g)?;
            }
            let kt = tape.transpose(kh, 2, 3)?;
            let logits = tape.matmul(qh, kt)?;
            let a = if cfg.variant.kind == AttnKind::StdSoftmax {
                let l = tape.scale(logits, 1.0 / (hd as f64).sqrt())?;
                tape.softmax(l, Mask::Causal)?
            } else {
                tape.mul_const(logits, causal_mask(n, false))?
            };
            let o = tape.matmul(a, vh)?;
            merge_heads(tape, o)
        }
        AttnKind::ElementWise => {
            let d = s[2];
            // Per channel: causal softmax over keys, shared by every query row.
            let kt = tape.transpose(k, 1, 2)?;
            let kt = tape.reshape(kt, &[b, d, 1, n])?;
            let kt = tape.broadcast(kt, &[b, d, n, n])?;
            let a = tape.softmax(kt, Mask::Causal)?;
            let vt = tape.transpose(v, 1, 2)?;
            let vt = tape.reshape(vt, &[b, d, n, 1])?;
            let o = tape.matmul(a, vt)?;
            let o = tape.reshape(o, &[b, d, n])?;
            let o = tape.transpose(o, 1, 2)?;
            let sq = tape.sigmoid(q)?;
            tape.mul(sq, o)
        }
        AttnKind::Fixed => unreachable!(),
    }
}

/// MA output for `[B, N, d]` inputs; `n >= 2`.
pub fn ma_output(tape: &mut Tape, q_ma: Var, k_ma: Var, v: Var, o_ar: Var, heads: usize, cfg: &ArmaConfig) -> Result<Var> {
    let s = tape.shape(q_ma).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let hd = d / heads;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let pq = tape.scale(q_ma, -inv_sqrt_d)?;
    let pq = tape.leaky_relu(pq, cfg.leaky_slope)?;
    let pq = tape.scale(pq, -1.0)?;
    let pk = tape.scale(k_ma, cfg.alpha * inv_sqrt_d)?;
    let pk = tape.sigmoid(pk)?;
    let pqh = split_heads(tape, pq, heads)?;
    let pkh = split_heads(tape, pk, heads)?;
    // Lag the queries by one step.
    let zero = tape.constant(Tensor::zeros(&[b, heads, 1, hd]))?;
    let head = tape.slice(pqh, 2, 0, n - 1)?;
    let lagged = tape.concat(&[zero, head], 2)?;
    let kt = tape.transpose(pkh, 2, 3)?;
    let beta = tape.matmul(lagged, kt)?;
    let beta = tape.scale(beta, 1.0 / hd as f64)?;
    let beta = tape.mul_const(beta, causal_mask(n, true))?;
    let beta = tape.slice(beta, 3, 0, n - 1)?;
    let next = tape.slice(v, 1, 1, n)?;
    let prev = tape.slice(o_ar, 1, 0, n - 1)?;
    let r = tape.sub(next, prev)?;
    let rh = split_heads(tape, r, heads)?;
    let o = tape.matmul(beta, rh)?;
    merge_heads(tape, o)
}

/// Differentiable layer forward. `dropout` is applied to the AR and MA
/// outputs separately; pass `None` at evaluation.
pub fn arma_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttnWeights<Var>,
    cfg: &ArmaConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let d = cfg.variant.model_dim();
    if s.len() != 3 || s[2] != d {
        return Err(Error::shape("attention layer", format!("input {s:?}, d = {d}")));
    }
    let (b, n) = (s[0], s[1]);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let fixed = cfg.variant.kind == AttnKind::Fixed;
    let v = match w.w_v {
        Some(wv) => tape.matmul(x, wv)?,
        None => x,
    };
    let (q, k) = if fixed {
        (None, None)
    } else {
        (
            Some(tape.matmul(x, *need(&w.w_q, "w_q")?)?),
            Some(tape.matmul(x, *need(&w.w_k, "w_k")?)?),
        )
    };
    let o_ar = ar_output(tape, x, q, k, v, w, cfg)?;
    let mut out = match dropout.as_deref_mut() {
        Some(dr) => dr.apply(tape, o_ar)?,
        None => o_ar,
    };
    if cfg.ma_enabled && n >= 2 {
        let (q_ma, k_ma) = if fixed {
            (
                batch_table(tape, *need(&w.w_ma_q, "w_ma_q")?, b, n)?,
                batch_table(tape, *need(&w.w_ma_k, "w_ma_k")?, b, n)?,
            )
        } else {
            let q_ma = match w.w_q_ma {
                Some(wq) => tape.matmul(x, wq)?,
                None => q.expect("q"),
            };
            (q_ma, tape.matmul(x, *need(&w.w_k_ma, "w_k_ma")?)?)
        };
        let o_ma = ma_output(tape, q_ma, k_ma, v, o_ar, cfg.ma_heads(), cfg)?;
        let o_ma = match dropout.as_deref_mut() {
            Some(dr) => dr.apply(tape, o_ma)?,
            None => o_ma,
        };
        out = tape.add(out, o_ma)?;
    }
    tape.matmul(out, w.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arma::arma_attention_layer;
    use crate::kernels::AttnVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(cfg: &ArmaConfig, rng: &mut ChaCha8Rng) -> AttnWeights<Tensor> {
        AttnWeights::assemble(cfg, 6, |s| Ok(Tensor::randn(&s.shape, 0.4, rng))).unwrap()
    }

    #[test]
    fn taped_layer_matches_plain_layer() {
        for kind in AttnKind::ALL {
            for ma in [false, true] {
                let mut cfg = ArmaConfig::new(AttnVariant::new(kind, 4, 2).unwrap());
                cfg.ma_enabled = ma;
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let w = weights(&cfg, &mut rng);
                let xs: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[5, 4], 1.0, &mut rng)).collect();
                let mut tape = Tape::new();
                let mut data = xs[0].data().to_vec();
                data.extend_from_slice(xs[1].data());
                let x = tape.constant(Tensor::new(vec![2, 5, 4], data).unwrap()).unwrap();
                let wv = AttnWeights::assemble(&cfg, 6, |s| {
                    let t = match s.name {
                        "w_q" => w.w_q.clone(),
                        "w_q_ma" => w.w_q_ma.clone(),
                        "w_k" | "w_k_ar" => w.w_k.clone(),
                        "w_k_ma" => w.w_k_ma.clone(),
                        "w_v" => w.w_v.clone(),
                        "w_o" => Some(w.w_o.clone()),
                        "w_g" => w.w_g.clone(),
                        "w_fixed" => w.w_fixed.clone(),
                        "w_ma_q" => w.w_ma_q.clone(),
                        "w_ma_k" => w.w_ma_k.clone(),
                        _ => None,
                    };
                    tape.param(t.unwrap())
                })
                .unwrap();
                let y = arma_attention(&mut tape, x, &wv, &cfg, None).unwrap();
                let y = tape.value(y).data().to_vec();
                for (bi, xb) in xs.iter().enumerate() {
                    let plain = arma_attention_layer(xb, &w, &cfg).unwrap();
                    let taped = Tensor::new(vec![5, 4], y[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
                    assert!(taped.rel_err(&plain) < 1e-12, "{kind} ma={ma}");
                }
            }
        }
    }
}
