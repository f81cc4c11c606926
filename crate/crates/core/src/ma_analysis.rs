//! Explicit-matrix view of the MA term.
//!
//! `B` holds the weights applied to residuals, `Θ = B (I - B)⁻¹` the implied
//! weights on the innovations `ε = (I + Θ)⁻¹ r`. Both inverses are unit
//! lower-triangular solves.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Query activations. `Neg*` are `-f(-x/√d)`; `Pos*` drop the outer sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiQ {
    NegLeakyRelu,
    NegRelu,
    NegSigmoid,
    NegSwish,
    PosLeakyRelu,
    PosRelu,
    PosSigmoid,
    PosSwish,
}

impl PhiQ {
    pub const ALL: [PhiQ; 8] = [
        PhiQ::NegLeakyRelu,
        PhiQ::NegRelu,
        PhiQ::NegSigmoid,
        PhiQ::NegSwish,
        PhiQ::PosLeakyRelu,
        PhiQ::PosRelu,
        PhiQ::PosSigmoid,
        PhiQ::PosSwish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhiQ::NegLeakyRelu => "neg-leaky-relu",
            PhiQ::NegRelu => "neg-relu",
            PhiQ::NegSigmoid => "neg-sigmoid",
            PhiQ::NegSwish => "neg-swish",
            PhiQ::PosLeakyRelu => "pos-leaky-relu",
            PhiQ::PosRelu => "pos-relu",
            PhiQ::PosSigmoid => "pos-sigmoid",
            PhiQ::PosSwish => "pos-swish",
        }
    }

    fn inner(self, u: f64, slope: f64) -> f64 {
        match self {
            PhiQ::NegLeakyRelu | PhiQ::PosLeakyRelu => {
                if u >= 0.0 {
                    u
                } else {
                    slope * u
                }
            }
            PhiQ::NegRelu | PhiQ::PosRelu => u.max(0.0),
            PhiQ::NegSigmoid | PhiQ::PosSigmoid => sigmoid(u),
            PhiQ::NegSwish | PhiQ::PosSwish => u * sigmoid(u),
        }
    }

    fn negated(self) -> bool {
        matches!(
            self,
            PhiQ::NegLeakyRelu | PhiQ::NegRelu | PhiQ::NegSigmoid | PhiQ::NegSwish
        )
    }

    /// Applies elementwise with `d` taken as the column count.
    pub fn apply(self, q: &Tensor, slope: f64) -> Tensor {
        let s = 1.0 / (q.cols() as f64).sqrt();
        let sign = if self.negated() { -1.0 } else { 1.0 };
        q.map(|x| sign * self.inner(-x * s, slope))
    }
}

impl fmt::Display for PhiQ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhiQ {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PhiQ::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown query activation `{s}`")))
    }
}

/// Key activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiK {
    Sigmoid,
}

impl PhiK {
    pub fn name(self) -> &'static str {
        match self {
            PhiK::Sigmoid => "sigmoid",
        }
    }

    /// `σ(α k/√d)` with `d` the column count.
    pub fn apply(self, k: &Tensor, alpha: f64) -> Tensor {
        match self {
            PhiK::Sigmoid => crate::arma::phi_k_ma(k, alpha),
        }
    }
}

impl fmt::Display for PhiK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhiK {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(PhiK::Sigmoid),
            _ => Err(Error::InvalidConfig(format!("unknown key activation `{s}`"))),
        }
    }
}

/// Activation choice for a study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiPair {
    pub phi_q: PhiQ,
    pub phi_k: PhiK,
    pub alpha: f64,
    pub slope: f64,
}

impl Default for PhiPair {
    fn default() -> Self {
        PhiPair {
            phi_q: PhiQ::NegLeakyRelu,
            phi_k: PhiK::Sigmoid,
            alpha: crate::arma::DEFAULT_ALPHA,
            slope: crate::arma::DEFAULT_LEAKY_SLOPE,
        }
    }
}

/// Per-head `B` matrices; `B[t, j] = mean_c φ_q(q_{t-1})_c φ_k(k_j)_c` over
/// the head's channels for `j < t`, zero elsewhere.
pub fn explicit_b_heads(q_ma: &Tensor, k_ma: &Tensor, heads: usize, phi: &PhiPair) -> Result<Vec<Tensor>> {
    if q_ma.rank() != 2 || q_ma.shape() != k_ma.shape() {
        return Err(Error::shape(
            "explicit_B",
            format!("q {:?}, k {:?}", q_ma.shape(), k_ma.shape()),
        ));
    }
    let (n, d) = (q_ma.rows(), q_ma.cols());
    if n < 2 {
        return Err(Error::shape("explicit_B", format!("need at least 2 steps, got {n}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("explicit_B", format!("d = {d} with {heads} heads")));
    }
    let hd = d / heads;
    let pq = phi.phi_q.apply(q_ma, phi.slope);
    let pk = phi.phi_k.apply(k_ma, phi.alpha);
    Ok((0..heads)
        .map(|h| {
            let c = h * hd..(h + 1) * hd;
            Tensor::from_fn2(n, n, |t, j| {
                if j < t {
                    let a = &pq.row(t - 1)[c.clone()];
                    let b = &pk.row(j)[c.clone()];
                    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / hd as f64
                } else {
                    0.0
                }
            })
        })
        .collect())
}

/// Single-head `B`.
pub fn explicit_b(q_ma: &Tensor, k_ma: &Tensor, phi: &PhiPair) -> Result<Tensor> {
    Ok(explicit_b_heads(q_ma, k_ma, 1, phi)?.remove(0))
}

/// `B · [R; 0]` applied per head, the explicit counterpart of the MA kernel.
pub fn apply_b_heads(bs: &[Tensor], r: &Tensor) -> Result<Tensor> {
    let n = bs.first().map(Tensor::rows).unwrap_or(0);
    if r.rank() != 2 || r.rows() + 1 != n || bs.is_empty() || r.cols() % bs.len() != 0 {
        return Err(Error::shape("apply_B", format!("residual {:?}, N = {n}", r.shape())));
    }
    let d = r.cols();
    let hd = d / bs.len();
    let mut out = Tensor::zeros(&[n, d]);
    for (h, b) in bs.iter().enumerate() {
        for t in 0..n {
            for j in 0..n - 1 {
                let w = b.at(t, j);
                for c in h * hd..(h + 1) * hd {
                    let x = out.at(t, c) + w * r.at(j, c);
                    out.set(t, c, x);
                }
            }
        }
    }
    Ok(out)
}

fn check_strict_lower(m: &Tensor) -> Result<usize> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::shape("triangular solve", format!("{:?}", m.shape())));
    }
    let n = m.rows();
    for i in 0..n {
        for j in i..n {
            let v = m.at(i, j);
            if v != 0.0 {
                return Err(Error::NotStrictlyLower {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    Ok(n)
}

/// `Θ = B (I - B)⁻¹`, via `Θ = B + B Θ` solved row by row.
pub fn implicit_theta(b: &Tensor) -> Result<Tensor> {
    let n = check_strict_lower(b)?;
    let mut th = Tensor::zeros(&[n, n]);
    for i in 1..n {
        for j in 0..i {
            let mut acc = b.at(i, j);
            for k in j + 1..i {
                acc += b.at(i, k) * th.at(k, j);
            }
            th.set(i, j, acc);
        }
    }
    Ok(th)
}

/// Solves `(I + Θ) ε = r` by forward substitution.
pub fn recover_epsilon(theta: &Tensor, r: &[f64]) -> Result<Vec<f64>> {
    let n = check_strict_lower(theta)?;
    if r.len() != n {
        return Err(Error::shape(
            "recover_epsilon",
            format!("Θ is {n}×{n}, r has {}", r.len()),
        ));
    }
    let mut eps = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| theta.at(i, j) * eps[j]).sum();
        eps[i] = r[i] - s;
    }
    Ok(eps)
}

/// Strictly lower-triangular matrix with every entry `b`.
pub fn constant_b(b: f64, n: usize) -> Tensor {
    Tensor::from_fn2(n, n, |i, j| if j < i { b } else { 0.0 })
}

/// Closed form for constant `B`: `θ_ij = b (1 + b)^(i - j - 1)` for `i > j`.
pub fn constant_b_theta(b: f64, n: usize) -> Result<Tensor> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("length must be at least 2, got {n}")));
    }
    Ok(Tensor::from_fn2(n, n, |i, j| {
        if i > j {
            b * (1.0 + b).powi((i - j - 1) as i32)
        } else {
            0.0
        }
    }))
}

/// Mean `|θ_{i, i-k}|` for each offset `k = 1..N-1` (index 0 is offset 1).
pub fn diag_profile(theta: &Tensor) -> Vec<f64> {
    let n = theta.rows();
    (1..n)
        .map(|k| (k..n).map(|i| theta.at(i, i - k).abs()).sum::<f64>() / (n - k) as f64)
        .collect()
}

/// Share of strictly-lower entries that are negative.
pub fn negativity_fraction(theta: &Tensor) -> f64 {
    let n = theta.rows();
    if n < 2 {
        return 0.0;
    }
    let neg = (1..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .filter(|&(i, j)| theta.at(i, j) < 0.0)
        .count();
    neg as f64 / (n * (n - 1) / 2) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaReport {
    /// `head{h}` or `mean`.
    pub label: String,
    pub b: Tensor,
    pub theta: Tensor,
    pub phi: PhiPair,
    pub diag_profile: Vec<f64>,
    pub negativity_fraction: f64,
}

impl ThetaReport {
    pub fn new(label: impl Into<String>, b: Tensor, theta: Tensor, phi: PhiPair) -> Self {
        ThetaReport {
            label: label.into(),
            diag_profile: diag_profile(&theta),
            negativity_fraction: negativity_fraction(&theta),
            b,
            theta,
            phi,
        }
    }
}

/// Reports for normal random `q, k` (`N × d`): one per head, then the
/// head average (skipped when there is a single head).
pub fn random_study(n: usize, d: usize, heads: usize, phi: &PhiPair, seed: u64) -> Result<Vec<ThetaReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Tensor::randn(&[n, d], 1.0, &mut rng);
    let k = Tensor::randn(&[n, d], 1.0, &mut rng);
    let bs = explicit_b_heads(&q, &k, heads, phi)?;
    let mut reports = Vec::with_capacity(heads + 1);
    for (h, b) in bs.into_iter().enumerate() {
        let th = implicit_theta(&b)?;
        reports.push(ThetaReport::new(format!("head{h}"), b, th, *phi));
    }
    if heads > 1 {
        let avg = |f: fn(&ThetaReport) -> &Tensor| {
            let mut acc = Tensor::zeros(&[n, n]);
            for r in &reports {
                for (a, x) in acc.data_mut().iter_mut().zip(f(r).data()) {
                    *a += x / heads as f64;
                }
            }
            acc
        };
        let (b, th) = (avg(|r| &r.b), avg(|r| &r.theta));
        reports.push(ThetaReport::new("mean", b, th, *phi));
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub phi_q: String,
    pub phi_k: String,
    pub seed: u64,
    pub negativity_fraction: f64,
    pub diag_profile: Vec<f64>,
}

fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `{stem}_B.csv`, `{stem}_theta.csv` and `{stem}.json` into `dir`.
pub fn export_weight_maps(report: &ThetaReport, d: usize, seed: u64, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b_path = dir.join(format!("{stem}_B.csv"));
    let t_path = dir.join(format!("{stem}_theta.csv"));
    let j_path = dir.join(format!("{stem}.json"));
    write_matrix(&b_path, &report.b)?;
    write_matrix(&t_path, &report.theta)?;
    let side = Sidecar {
        n: report.b.rows(),
        d,
        alpha: report.phi.alpha,
        phi_q: report.phi.phi_q.name().into(),
        phi_k: report.phi.phi_k.name().into(),
        seed,
        negativity_fraction: report.negativity_fraction,
        diag_profile: report.diag_profile.clone(),
    };
    let mut text = serde_json::to_string_pretty(&side)?;
    text.push('\n');
    fs::write(&j_path, text).map_err(|e| Error::io(&j_path, e))?;
    Ok(vec![b_path, t_path, j_path])
}
