//! Explicit masked-matrix forms: build the `N × N` weight matrix per head,
//! then multiply by the values.

use super::{check_fixed, check_qkv, dot};
use crate::autodiff::{log_sigmoid, sigmoid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Applies per-head weight matrices `w[h]` (N×N, already masked) to `v`.
fn mix(weights: &[Tensor], v: &Tensor, hd: usize) -> Tensor {
    let n = v.rows();
    let mut out = Tensor::zeros(v.shape());
    for (h, w) in weights.iter().enumerate() {
        for t in 0..n {
            for i in 0..n {
                let a = w.at(t, i);
                if a == 0.0 {
                    continue;
                }
                let (vr, c0) = (v.row(i), h * hd);
                let orow = out.row_mut(t);
                for c in 0..hd {
                    orow[c0 + c] += a * vr[c0 + c];
                }
            }
        }
    }
    out
}

fn head(x: &Tensor, t: usize, h: usize, hd: usize) -> &[f64] {
    &x.row(t)[h * hd..(h + 1) * hd]
}

/// Causal softmax attention with logits scaled by `1/sqrt(head_dim)`.
pub fn softmax_attn(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, hd) = check_qkv(q, k, v, heads)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut w = Tensor::zeros(&[n, n]);
        for t in 0..n {
            let logits: Vec<f64> = (0..=t)
                .map(|i| scale * dot(head(q, t, h, hd), head(k, i, h, hd)))
                .collect();
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "softmax logits" });
            }
            let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for (i, ei) in e.iter().enumerate() {
                w.set(t, i, ei / s);
            }
        }
        weights.push(w);
    }
    Ok(mix(&weights, v, hd))
}

/// `(Q Kᵀ ⊙ M) V` per head, identity feature map, no denominator.
pub fn linear_attn(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, hd) = check_qkv(q, k, v, heads)?;
    let weights: Vec<Tensor> = (0..heads)
        .map(|h| {
            Tensor::from_fn2(n, n, |t, i| {
                if i <= t {
                    dot(head(q, t, h, hd), head(k, i, h, hd))
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(mix(&weights, v, hd))
}

/// AFT-style attention: `σ(q_t) ⊙ Σ softmax_{i≤t}(k_i) v_i` per channel.
pub fn elementwise_attn(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, _) = check_qkv(q, k, v, 1)?;
    let d = q.cols();
    let mut out = Tensor::zeros(&[n, d]);
    for c in 0..d {
        for t in 0..n {
            let mx = (0..=t).map(|i| k.at(i, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..=t {
                let e = (k.at(i, c) - mx).exp();
                num += e * v.at(i, c);
                den += e;
            }
            out.set(t, c, sigmoid(q.at(t, c)) * num / den);
        }
    }
    Ok(out)
}

/// Cumulative gate `G_i = Π_{k≤i} σ(g_k)`, accumulated in log space.
pub fn cumulative_gate(gate_logits: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    gate_logits
        .iter()
        .map(|&g| {
            acc += log_sigmoid(g);
            acc.exp()
        })
        .collect()
}

/// Gated linear attention with absolute cumulative gates:
/// `o_t = q_t Σ_{i≤t} G_i k_iᵀ v_i`.
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
    let g = cumulative_gate(gate_logits);
    let weights: Vec<Tensor> = (0..heads)
        .map(|h| {
            Tensor::from_fn2(n, n, |t, i| {
                if i <= t {
                    g[i] * dot(head(q, t, h, hd), head(k, i, h, hd))
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(mix(&weights, v, hd))
}

/// Causal linear layer: `o_t = Σ_{i≤t} w_{t,i} v_i`, upper triangle ignored.
pub fn fixed_attn(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    let n = check_fixed(w, v)?;
    let masked = Tensor::from_fn2(n, n, |t, i| if i <= t { w.at(t, i) } else { 0.0 });
    masked.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_first_step_returns_first_value() {
        let q = Tensor::from_fn2(3, 2, |i, j| (i + 2 * j) as f64 * 0.3);
        let k = Tensor::from_fn2(3, 2, |i, j| (i as f64) - (j as f64));
        let v = Tensor::from_fn2(3, 2, |i, j| (3 * i + j) as f64);
        let o = softmax_attn(&q, &k, &v, 1).unwrap();
        assert_eq!(o.row(0), v.row(0));
    }

    #[test]
    fn softmax_equal_logits_average() {
        let q = Tensor::zeros(&[3, 2]);
        let k = Tensor::from_fn2(3, 2, |i, j| (i * j) as f64);
        let v = Tensor::from_fn2(3, 2, |i, j| (i * 2 + j) as f64);
        let o = softmax_attn(&q, &k, &v, 2).unwrap();
        assert!((o.at(2, 0) - 2.0).abs() < 1e-15);
        assert!((o.at(2, 1) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn linear_hand_recurrence() {
        let o = linear_attn(&col(&[1., 2.]), &col(&[1., 1.]), &col(&[2., 3.]), 1).unwrap();
        assert_eq!(o.data(), &[2.0, 10.0]);
    }

    #[test]
    fn zero_query_gives_zero_output() {
        let q = Tensor::zeros(&[4, 2]);
        let k = Tensor::from_fn2(4, 2, |i, j| (i + j) as f64);
        let o = linear_attn(&q, &k, &k, 2).unwrap();
        assert!(o.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn elementwise_hand_recurrence() {
        let o = elementwise_attn(&col(&[0., 0.]), &col(&[0., 0.]), &col(&[4., 6.])).unwrap();
        assert_eq!(o.data(), &[2.0, 2.5]);
    }

    #[test]
    fn gated_hand_recurrence() {
        let o = gated_linear_attn(&col(&[1., 1.]), &col(&[1., 1.]), &col(&[1., 2.]), &[0., 0.], 1)
            .unwrap();
        assert_eq!(o.data(), &[0.5, 1.0]);
    }

    #[test]
    fn fixed_ones_is_cumsum_and_identity_is_passthrough() {
        let v = Tensor::from_fn2(4, 2, |i, j| (i * 2 + j) as f64);
        let ones = Tensor::full(&[5, 5], 1.0);
        let o = fixed_attn(&ones, &v).unwrap();
        assert_eq!(o.row(3), &[12.0, 16.0]);
        assert_eq!(fixed_attn(&Tensor::eye(6), &v).unwrap(), v);
        assert!(matches!(
            fixed_attn(&Tensor::eye(3), &v),
            Err(Error::SequenceTooLong { len: 4, max: 3 })
        ));
    }

    #[test]
    fn empty_sequence_rejected() {
        let e = Tensor::zeros(&[0, 2]);
        assert!(matches!(linear_attn(&e, &e, &e, 1), Err(Error::EmptySequence)));
    }
}
