//! The five autoregressive attention mechanisms, each in a recurrent (O(N)
//! state update) form and a parallel (explicit masked N×N) form.
//!
//! Inputs are `N × d` matrices with heads laid out as contiguous column
//! blocks of width `head_dim`. The two forms are mathematically identical and
//! serve as each other's oracle.

pub mod parallel;
pub mod recurrent;

pub use recurrent::RecurrentState;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnKind {
    StdSoftmax,
    Linear,
    ElementWise,
    GatedLinear,
    Fixed,
}

impl AttnKind {
    pub const ALL: [AttnKind; 5] = [
        AttnKind::StdSoftmax,
        AttnKind::Linear,
        AttnKind::ElementWise,
        AttnKind::GatedLinear,
        AttnKind::Fixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttnKind::StdSoftmax => "std-softmax",
            AttnKind::Linear => "linear",
            AttnKind::ElementWise => "element-wise",
            AttnKind::GatedLinear => "gated-linear",
            AttnKind::Fixed => "fixed",
        }
    }

    /// Short label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            AttnKind::StdSoftmax => "Std Attn",
            AttnKind::Linear => "Lin Attn",
            AttnKind::ElementWise => "ELin Attn",
            AttnKind::GatedLinear => "GLin Attn",
            AttnKind::Fixed => "Fixed Attn",
        }
    }
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttnKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attention variant `{s}`")))
    }
}

/// Head layout of one attention variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnVariant {
    pub kind: AttnKind,
    pub head_count: usize,
    pub head_dim: usize,
}

impl AttnVariant {
    /// Element-wise attention always runs with one head per channel, and
    /// fixed attention mixes whole tokens with one scalar weight.
    pub fn new(kind: AttnKind, d: usize, heads: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("model dim must be positive".into()));
        }
        let heads = match kind {
            AttnKind::ElementWise => d,
            AttnKind::Fixed => 1,
            _ => heads,
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        Ok(AttnVariant {
            kind,
            head_count: heads,
            head_dim: d / heads,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.head_count * self.head_dim
    }
}

pub(crate) fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize)> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (n, d) = (q.rows(), q.cols());
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("d = {d} with {heads} heads")));
    }
    Ok((n, d / heads))
}

pub(crate) fn check_fixed(w: &Tensor, v: &Tensor) -> Result<usize> {
    if v.rank() != 2 || w.rank() != 2 || w.rows() != w.cols() {
        return Err(Error::shape(
            "fixed attention",
            format!("w {:?}, v {:?}", w.shape(), v.shape()),
        ));
    }
    let n = v.rows();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if n > w.rows() {
        return Err(Error::SequenceTooLong {
            len: n,
            max: w.rows(),
        });
    }
    Ok(n)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
