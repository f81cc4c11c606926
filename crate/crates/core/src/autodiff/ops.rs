//! Forward values and adjoints of every [`Primitive`].

use rayon::prelude::*;

use super::{Mask, Primitive};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Work (in multiply-adds) below which matmuls stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

pub(super) fn forward(op: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Primitive::Concat { .. } => {
            if x.is_empty() {
                return Err(Error::shape(name, "no inputs"));
            }
        }
        Primitive::MatMul
        | Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::Div
        | Primitive::Mse => arity(name, x, 2)?,
        _ => arity(name, x, 1)?,
    }
    match op {
        Primitive::MatMul => matmul(x[0], x[1]),
        Primitive::Add => x[0].zip_map(x[1], |a, b| a + b).map_err(|_| mismatch(name, x)),
        Primitive::Sub => x[0].zip_map(x[1], |a, b| a - b).map_err(|_| mismatch(name, x)),
        Primitive::Mul => x[0].zip_map(x[1], |a, b| a * b).map_err(|_| mismatch(name, x)),
        Primitive::Div => x[0].zip_map(x[1], |a, b| a / b).map_err(|_| mismatch(name, x)),
        Primitive::Exp => Ok(x[0].map(f64::exp)),
        Primitive::Sigmoid => Ok(x[0].map(sigmoid)),
        Primitive::LogSigmoid => Ok(x[0].map(log_sigmoid)),
        Primitive::LeakyRelu { slope } => {
            let s = *slope;
            Ok(x[0].map(|v| if v >= 0.0 { v } else { s * v }))
        }
        Primitive::Gelu => Ok(x[0].map(gelu)),
        Primitive::MaskedSoftmax { mask } => softmax(x[0], *mask),
        Primitive::RmsNorm { eps } => rms_norm(x[0], *eps),
        Primitive::Transpose { a, b } => transpose(x[0], *a, *b),
        Primitive::Reshape { shape } => x[0].clone().reshaped(shape),
        Primitive::Slice { axis, start, end } => slice(x[0], *axis, *start, *end),
        Primitive::Concat { axis } => concat(x, *axis),
        Primitive::CumSum { axis } => cumsum(x[0], *axis, false),
        Primitive::BroadcastTo { shape } => broadcast(x[0], shape),
        Primitive::Scale(c) => {
            let c = *c;
            Ok(x[0].map(|v| c * v))
        }
        Primitive::Mean => {
            let n = x[0].numel().max(1) as f64;
            Ok(Tensor::scalar(x[0].data().iter().sum::<f64>() / n))
        }
        Primitive::Sum => Ok(Tensor::scalar(x[0].data().iter().sum())),
        Primitive::Mse => {
            if x[0].shape() != x[1].shape() {
                return Err(mismatch(name, x));
            }
            let n = x[0].numel().max(1) as f64;
            let s: f64 = x[0]
                .data()
                .iter()
                .zip(x[1].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(Tensor::scalar(s / n))
        }
        Primitive::Map(f) => Ok(x[0].map(f.f)),
    }
}

/// Vector-Jacobian products for each input (only where `needs[i]`).
pub(super) fn backward(
    op: &Primitive,
    x: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let unary = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Primitive::MatMul => matmul_backward(x[0], x[1], g, want(0), want(1)),
        Primitive::Add => Ok(vec![
            want(0).then(|| g.clone()),
            want(1).then(|| g.clone()),
        ]),
        Primitive::Sub => Ok(vec![
            want(0).then(|| g.clone()),
            want(1).then(|| g.map(|v| -v)),
        ]),
        Primitive::Mul => Ok(vec![
            want(0).then(|| g.zip_map(x[1], |g, b| g * b)).transpose()?,
            want(1).then(|| g.zip_map(x[0], |g, a| g * a)).transpose()?,
        ]),
        Primitive::Div => Ok(vec![
            want(0).then(|| g.zip_map(x[1], |g, b| g / b)).transpose()?,
            want(1)
                .then(|| -> Result<Tensor> {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.zip_map(out, |g, o| -g * o)?;
                    t.zip_map(x[1], |t, b| t / b)
                })
                .transpose()?,
        ]),
        Primitive::Exp => unary(g.zip_map(out, |g, o| g * o)?),
        Primitive::Sigmoid => unary(g.zip_map(out, |g, s| g * s * (1.0 - s))?),
        Primitive::LogSigmoid => unary(g.zip_map(x[0], |g, v| g * sigmoid(-v))?),
        Primitive::LeakyRelu { slope } => {
            let s = *slope;
            unary(g.zip_map(x[0], |g, v| if v >= 0.0 { g } else { s * g })?)
        }
        Primitive::Gelu => unary(g.zip_map(x[0], |g, v| g * gelu_grad(v))?),
        Primitive::MaskedSoftmax { .. } => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; out.numel()];
            for ((dxr, yr), gr) in dx
                .chunks_mut(n)
                .zip(out.data().chunks(n))
                .zip(g.data().chunks(n))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (gv - dot);
                }
            }
            unary(Tensor::new(out.shape().to_vec(), dx)?)
        }
        Primitive::RmsNorm { eps } => {
            let n = *x[0].shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; out.numel()];
            for (((dxr, xr), yr), gr) in dx
                .chunks_mut(n)
                .zip(x[0].data().chunks(n))
                .zip(out.data().chunks(n))
                .zip(g.data().chunks(n))
            {
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                let r = (ms + eps).sqrt();
                let dot = yr.iter().zip(gr).map(|(y, g)| y * g).sum::<f64>() / n as f64;
                for ((d, y), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = (gv - y * dot) / r;
                }
            }
            unary(Tensor::new(out.shape().to_vec(), dx)?)
        }
        Primitive::Transpose { a, b } => unary(transpose(g, *a, *b)?),
        Primitive::Reshape { .. } => unary(g.clone().reshaped(x[0].shape())?),
        Primitive::Slice { axis, start, .. } => {
            let (outer, len, inner) = split_axis(x[0].shape(), *axis);
            let glen = g.shape()[*axis];
            let mut dx = vec![0.0; x[0].numel()];
            for o in 0..outer {
                let src = &g.data()[o * glen * inner..(o + 1) * glen * inner];
                let dst = o * len * inner + start * inner;
                dx[dst..dst + glen * inner].copy_from_slice(src);
            }
            unary(Tensor::new(x[0].shape().to_vec(), dx)?)
        }
        Primitive::Concat { axis } => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(x.len());
            for (i, part) in x.iter().enumerate() {
                let len = part.shape()[*axis];
                if want(i) {
                    grads.push(Some(slice(g, *axis, offset, offset + len)?));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            Ok(grads)
        }
        Primitive::CumSum { axis } => unary(cumsum(g, *axis, true)?),
        Primitive::BroadcastTo { .. } => unary(reduce_to(g, x[0].shape())?),
        Primitive::Scale(c) => {
            let c = *c;
            unary(g.map(|v| c * v))
        }
        Primitive::Mean => {
            let n = x[0].numel().max(1) as f64;
            unary(Tensor::full(x[0].shape(), g.item() / n))
        }
        Primitive::Sum => unary(Tensor::full(x[0].shape(), g.item())),
        Primitive::Mse => {
            let n = x[0].numel().max(1) as f64;
            let c = 2.0 * g.item() / n;
            let diff = x[0].zip_map(x[1], |a, b| c * (a - b))?;
            Ok(vec![
                want(0).then(|| diff.clone()),
                want(1).then(|| diff.map(|v| -v)),
            ])
        }
        Primitive::Map(f) => {
            let df = f.df;
            unary(g.zip_map(x[0], |g, v| g * df(v))?)
        }
    }
}

fn arity(name: &'static str, x: &[&Tensor], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::shape(name, format!("expects {n} inputs, got {}", x.len())));
    }
    Ok(())
}

fn mismatch(name: &'static str, x: &[&Tensor]) -> Error {
    let shapes: Vec<&[usize]> = x.iter().map(|t| t.shape()).collect();
    Error::shape(name, format!("{shapes:?}"))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `(outer, len, inner)` around `axis` in row-major order.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(name: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(name, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

// ---- matmul -------------------------------------------------------------

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    let (ra, rb) = (a.rank(), b.rank());
    let bad = || Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    if ra < 2 || rb < 2 {
        return Err(bad());
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(bad());
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let shared_rhs = rb == 2;
    if !shared_rhs && a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(bad());
    }
    Ok((batch, m, k, n, shared_rhs))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, shared_rhs) = matmul_dims(a, b)?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    if shared_rhs {
        gemm_nn(a.data(), b.data(), &mut out, batch * m, k, n);
    } else {
        let work = m * k * n;
        let body = |(bi, o): (usize, &mut [f64])| {
            let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
            crate::tensor::gemm(ab, bb, o, m, k, n);
        };
        if batch * work >= PAR_THRESHOLD && batch > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(body);
        } else {
            out.chunks_mut(m * n).enumerate().for_each(body);
        }
    }
    Tensor::new(shape, out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Result<Vec<Option<Tensor>>> {
    let (batch, m, k, n, shared_rhs) = matmul_dims(a, b)?;
    let mut da = None;
    let mut db = None;
    if need_a {
        // dA = G · Bᵀ
        let mut out = vec![0.0; batch * m * k];
        if shared_rhs {
            gemm_nt(g.data(), b.data(), &mut out, batch * m, n, k);
        } else {
            for bi in 0..batch {
                gemm_nt(
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * k..(bi + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
        }
        da = Some(Tensor::new(a.shape().to_vec(), out)?);
    }
    if need_b {
        // dB = Aᵀ · G, summed over the batch when B is shared
        let mut out = vec![0.0; if shared_rhs { k * n } else { batch * k * n }];
        if shared_rhs {
            gemm_tn(a.data(), g.data(), &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                gemm_tn(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut out[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        db = Some(Tensor::new(b.shape().to_vec(), out)?);
    }
    Ok(vec![da, db])
}

/// `out (m×n) += a (m×k) · b (k×n)`; rows split across threads for large inputs.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n < PAR_THRESHOLD || m < 2 {
        crate::tensor::gemm(a, b, out, m, k, n);
        return;
    }
    let rows = rows_per_task(m, k * n);
    out.par_chunks_mut(rows * n)
        .enumerate()
        .for_each(|(ci, o)| {
            let r0 = ci * rows;
            let r = o.len() / n;
            crate::tensor::gemm(&a[r0 * k..(r0 + r) * k], b, o, r, k, n);
        });
}

/// `out (m×k) += a (m×n) · b (k×n)ᵀ`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let body = |r0: usize, o: &mut [f64]| {
        for (ri, orow) in o.chunks_mut(k).enumerate() {
            let arow = &a[(r0 + ri) * n..(r0 + ri + 1) * n];
            for (p, ov) in orow.iter_mut().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                *ov += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    };
    if m * k * n < PAR_THRESHOLD || m < 2 {
        body(0, out);
        return;
    }
    let rows = rows_per_task(m, k * n);
    out.par_chunks_mut(rows * k)
        .enumerate()
        .for_each(|(ci, o)| body(ci * rows, o));
}

/// `out (k×n) += a (m×k)ᵀ · b (m×n)`. Each output row sums over `m` in order.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |p0: usize, o: &mut [f64]| {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for (pi, orow) in o.chunks_mut(n).enumerate() {
                let av = a[i * k + p0 + pi];
                if av == 0.0 {
                    continue;
                }
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    };
    if m * k * n < PAR_THRESHOLD || k < 2 {
        body(0, out);
        return;
    }
    let rows = rows_per_task(k, m * n);
    out.par_chunks_mut(rows * n)
        .enumerate()
        .for_each(|(ci, o)| body(ci * rows, o));
}

fn rows_per_task(rows: usize, work_per_row: usize) -> usize {
    let target = (PAR_THRESHOLD / work_per_row.max(1)).max(1);
    target.min(rows).max(1)
}

// ---- softmax / norms ----------------------------------------------------

fn softmax(x: &Tensor, mask: Mask) -> Result<Tensor> {
    let shape = x.shape();
    if shape.is_empty() || (mask == Mask::Causal && shape.len() < 2) {
        return Err(Error::shape("row-softmax", format!("{shape:?}")));
    }
    let n = shape[shape.len() - 1];
    let rows_per_block = if mask == Mask::Causal {
        shape[shape.len() - 2]
    } else {
        1
    };
    let mut out = vec![0.0; x.numel()];
    for (r, (orow, xrow)) in out.chunks_mut(n).zip(x.data().chunks(n)).enumerate() {
        let visible = match mask {
            Mask::None => n,
            Mask::Causal => (r % rows_per_block + 1).min(n),
        };
        let xs = &xrow[..visible];
        let mx = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0;
        for (o, &v) in orow[..visible].iter_mut().zip(xs) {
            *o = (v - mx).exp();
            s += *o;
        }
        for o in &mut orow[..visible] {
            *o /= s;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn rms_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("rms-normalize", "scalar input"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let r = (ms + eps).sqrt();
        for v in row {
            *v /= r;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

// ---- layout -------------------------------------------------------------

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `out[idx] = src[Σ idx_d * src_strides[d]]` in row-major order of `out_shape`.
fn gather(src: &[f64], out_shape: &[usize], src_strides: &[usize]) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return out;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn transpose(x: &Tensor, a: usize, b: usize) -> Result<Tensor> {
    let shape = x.shape();
    check_axis("transpose", shape, a)?;
    check_axis("transpose", shape, b)?;
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut st = strides(shape);
    st.swap(a, b);
    Tensor::new(out_shape.clone(), gather(x.data(), &out_shape, &st))
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x.shape(), axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    if start > end || end > len {
        return Err(Error::shape(
            "slice",
            format!("{start}..{end} out of range for axis {axis} of {:?}", x.shape()),
        ));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + w * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = w;
    Tensor::new(shape, out)
}

fn concat(x: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = x[0].shape();
    check_axis("concat", first, axis)?;
    for t in x {
        let s = t.shape();
        if s.len() != first.len()
            || s[..axis] != first[..axis]
            || s[axis + 1..] != first[axis + 1..]
        {
            return Err(mismatch("concat", x));
        }
    }
    let (outer, _, inner) = split_axis(first, axis);
    let total: usize = x.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in x {
            let w = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

fn cumsum(x: &Tensor, axis: usize, reverse: bool) -> Result<Tensor> {
    check_axis("cumsum", x.shape(), axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut acc = 0.0;
            for step in 0..len {
                let t = if reverse { len - 1 - step } else { step };
                let at = base + t * inner + i;
                acc += out[at];
                out[at] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Right-aligned strides of `src` viewed inside `target`, 0 on broadcast dims.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if src.len() > target.len() {
        return Err(Error::shape("broadcast", format!("{src:?} -> {target:?}")));
    }
    let lead = target.len() - src.len();
    let ss = strides(src);
    let mut out = vec![0; target.len()];
    for (i, (&s, &st)) in src.iter().zip(&ss).enumerate() {
        let t = target[lead + i];
        if s == t {
            out[lead + i] = st;
        } else if s != 1 {
            return Err(Error::shape("broadcast", format!("{src:?} -> {target:?}")));
        }
    }
    Ok(out)
}

fn broadcast(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let st = broadcast_strides(x.shape(), shape)?;
    Tensor::new(shape.to_vec(), gather(x.data(), shape, &st))
}

/// Sums `g` back down to `shape` (adjoint of broadcasting).
fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let st = broadcast_strides(shape, g.shape())?;
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    let gs = g.shape();
    let rank = gs.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in g.data() {
        out[off] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < gs[d] {
                break;
            }
            off -= st[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn transpose_swaps_axes() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = transpose(&x, 0, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
        let z = Tensor::from_fn2(1, 24, |_, j| j as f64).reshaped(&[2, 3, 4]).unwrap();
        let zt = transpose(&z, 0, 2).unwrap();
        assert_eq!(zt.shape(), &[4, 3, 2]);
        // element (i, j, k) of z lands at (k, j, i)
        assert_eq!(zt.data()[3 * 6 + 2 * 2 + 1], z.data()[12 + 2 * 4 + 3]);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let x = t(&[1, 3], &[1., 2., 3.]);
        let y = broadcast(&x, &[2, 2, 3]).unwrap();
        assert_eq!(y.data(), &[1., 2., 3., 1., 2., 3., 1., 2., 3., 1., 2., 3.]);
        let r = reduce_to(&y, &[1, 3]).unwrap();
        assert_eq!(r.data(), &[4., 8., 12.]);
        assert!(broadcast(&x, &[2, 4]).is_err());
    }

    #[test]
    fn cumsum_forward_and_reverse() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(cumsum(&x, 1, false).unwrap().data(), &[1., 3., 6., 4., 9., 15.]);
        assert_eq!(cumsum(&x, 0, false).unwrap().data(), &[1., 2., 3., 5., 7., 9.]);
        assert_eq!(cumsum(&x, 1, true).unwrap().data(), &[6., 5., 3., 15., 11., 6.]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let x = Tensor::from_fn2(3, 4, |i, j| (i * 4 + j) as f64);
        let a = slice(&x, 1, 0, 1).unwrap();
        let b = slice(&x, 1, 1, 4).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap(), x);
        assert!(slice(&x, 1, 2, 5).is_err());
    }

    #[test]
    fn causal_softmax_masks_exactly() {
        let x = t(&[3, 3], &[5., 100., 100., 1., 1., 100., 0., 0., 0.]);
        let y = softmax(&x, Mask::Causal).unwrap();
        assert_eq!(&y.data()[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&y.data()[3..6], &[0.5, 0.5, 0.0]);
        for v in &y.data()[6..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_and_shared_matmul_agree() {
        let a = Tensor::from_fn2(1, 12, |_, j| j as f64 * 0.1)
            .reshaped(&[2, 2, 3])
            .unwrap();
        let w = Tensor::from_fn2(3, 2, |i, j| (i as f64) - (j as f64));
        let shared = matmul(&a, &w).unwrap();
        let wb = broadcast(&w, &[2, 3, 2]).unwrap();
        let batched = matmul(&a, &wb).unwrap();
        assert_eq!(shared, batched);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}
