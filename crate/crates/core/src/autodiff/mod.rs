//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only list of nodes. Leaves hold inputs and
//! parameters; every other node records one [`Primitive`] application
//! together with its output value. Since inputs always precede their
//! consumers, the node index is a topological order and [`Tape::backward`]
//! is a single reverse sweep.

mod gradcheck;
mod ops;

use std::fmt;
use std::str::FromStr;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_ABS_FLOOR};
pub use ops::{log_sigmoid, sigmoid};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries of the trailing `rows × cols` block a softmax may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Entry `(i, j)` is visible iff `j <= i`.
    Causal,
}

/// Elementwise function with a user-supplied derivative.
#[derive(Clone, Copy)]
pub struct ElementwiseFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl fmt::Debug for ElementwiseFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ElementwiseFn({})", self.name)
    }
}

#[derive(Clone, Debug)]
pub enum Primitive {
    /// `[.., m, k] x [.., k, n]` with equal batch dims, or a rank-2 right operand.
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Sigmoid,
    LogSigmoid,
    LeakyRelu { slope: f64 },
    Gelu,
    /// Softmax over the last axis; masked entries get exactly zero weight.
    MaskedSoftmax { mask: Mask },
    /// `x / sqrt(mean(x^2) + eps)` over the last axis.
    RmsNorm { eps: f64 },
    Transpose { a: usize, b: usize },
    Reshape { shape: Vec<usize> },
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    CumSum { axis: usize },
    BroadcastTo { shape: Vec<usize> },
    Scale(f64),
    Mean,
    Sum,
    /// `mean((a - b)^2)`.
    Mse,
    Map(ElementwiseFn),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Exp => "exp",
            Primitive::Sigmoid => "sigmoid",
            Primitive::LogSigmoid => "log-sigmoid",
            Primitive::LeakyRelu { .. } => "leaky-relu",
            Primitive::Gelu => "gelu",
            Primitive::MaskedSoftmax { .. } => "row-softmax",
            Primitive::RmsNorm { .. } => "rms-normalize",
            Primitive::Transpose { .. } => "transpose",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Slice { .. } => "slice",
            Primitive::Concat { .. } => "concat",
            Primitive::CumSum { .. } => "cumsum",
            Primitive::BroadcastTo { .. } => "broadcast",
            Primitive::Scale(_) => "scale",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Mse => "mse",
            Primitive::Map(f) => f.name,
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses a parameter-free primitive name; parameterised primitives get
    /// their conventional defaults (`leaky-relu` slope 0.02, causal softmax,
    /// `rms-normalize` epsilon 1e-8).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "exp" => Primitive::Exp,
            "sigmoid" => Primitive::Sigmoid,
            "log-sigmoid" => Primitive::LogSigmoid,
            "leaky-relu" => Primitive::LeakyRelu { slope: 0.02 },
            "gelu" => Primitive::Gelu,
            "row-softmax" => Primitive::MaskedSoftmax { mask: Mask::Causal },
            "rms-normalize" => Primitive::RmsNorm { eps: RMS_EPS },
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            "mse" => Primitive::Mse,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

pub const RMS_EPS: f64 = 1e-8;

struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Primitive>, inputs: Vec<usize>, rg: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input. Gradients are only accumulated for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, None, Vec::new(), requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Applies a primitive, recording it when any input requires a gradient.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = ops::forward(&op, &values)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let idx = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(out, Some(op), idx, rg))
    }

    /// Reverse sweep from a scalar `loss`. Each recorded node is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else { continue };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let gins = ops::backward(op, &ins, &node.value, &gout, &needs)?;
            for (&j, g) in node.inputs.iter().zip(gins) {
                let Some(g) = g else { continue };
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if self.nodes[i].op.is_some() && i != loss.0 {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    // ---- convenience wrappers -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSigmoid, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(Primitive::LeakyRelu { slope }, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }
    pub fn softmax(&mut self, a: Var, mask: Mask) -> Result<Var> {
        self.apply(Primitive::MaskedSoftmax { mask }, &[a])
    }
    pub fn rms_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::RmsNorm { eps: RMS_EPS }, &[a])
    }
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        self.apply(Primitive::Transpose { a: ax0, b: ax1 }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::CumSum { axis }, &[a])
    }
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::BroadcastTo {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mse, &[a, b])
    }
    pub fn map(&mut self, a: Var, f: ElementwiseFn) -> Result<Var> {
        self.apply(Primitive::Map(f), &[a])
    }

    /// Multiplies by a constant tensor broadcast to `a`'s shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = self.constant(c)?;
        let c = if self.shape(c) == shape.as_slice() {
            c
        } else {
            self.broadcast(c, &shape)?
        };
        self.mul(a, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn identity_matmul_and_scalar_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2)).unwrap();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let p = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(p), tape.value(a));

        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        let m1 = tape.constant(Tensor::scalar(-1.0)).unwrap();
        let l = tape.leaky_relu(m1, 0.02).unwrap();
        assert_eq!(tape.value(l).item(), -0.02);

        let zz = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let sm = tape.softmax(zz, Mask::Causal).unwrap();
        assert_eq!(tape.value(sm).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn overflow_is_surfaced() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn unknown_primitive_name() {
        assert!(matches!(
            "conv2d".parse::<Primitive>(),
            Err(Error::UnknownPrimitive(_))
        ));
        assert_eq!("gelu".parse::<Primitive>().unwrap().name(), "gelu");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        let c = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn leaf_grads_keep_shape() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[2, 3], 0.5)).unwrap();
        let b = tape.param(Tensor::full(&[3, 4], -0.25)).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().shape(), &[2, 3]);
        assert_eq!(tape.grad(b).unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn rms_norm_has_unit_rms() {
        let x = t(&[2, 4], &[1., -2., 3., 0.5, 10., 20., -30., 40.]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let exact = tape.apply(Primitive::RmsNorm { eps: 0.0 }, &[xv]).unwrap();
        let eps = tape.rms_norm(xv).unwrap();
        for (r, (row, raw)) in tape
            .value(exact)
            .data()
            .chunks(4)
            .zip(x.data().chunks(4))
            .enumerate()
        {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
            // with the epsilon the rms is sqrt(ms / (ms + eps))
            let ms = raw.iter().map(|v| v * v).sum::<f64>() / 4.0;
            let row_eps = &tape.value(eps).data()[r * 4..r * 4 + 4];
            let rms_eps = (row_eps.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
            assert!((rms_eps - (ms / (ms + RMS_EPS)).sqrt()).abs() < 1e-12);
        }
    }
}
