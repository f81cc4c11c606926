//! Shared fixtures for the benchmarks.

use arma_core::arma::ArmaConfig;
use arma_core::diagnostics::random_attn_weights;
use arma_core::{AttnKind, AttnVariant, AttnWeights, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub gates: Vec<f64>,
}

pub fn qkv(n: usize, d: usize, seed: u64) -> Qkv {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Tensor::randn(&[n, d], 0.5, &mut rng);
    let k = Tensor::randn(&[n, d], 0.5, &mut rng);
    let v = Tensor::randn(&[n, d], 1.0, &mut rng);
    let gates = Tensor::randn(&[n], 1.0, &mut rng).data().iter().map(|g| g + 3.0).collect();
    Qkv { q, k, v, gates }
}

/// Input and weights for one attention layer.
pub fn layer(kind: AttnKind, ma: bool, n: usize, d: usize, heads: usize, seed: u64) -> (Tensor, AttnWeights<Tensor>, ArmaConfig) {
    let variant = AttnVariant::new(kind, d, heads).expect("valid variant");
    let cfg = if ma { ArmaConfig::new(variant) } else { ArmaConfig::ar_only(variant) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let w = random_attn_weights(&cfg, n, 0.3, &mut rng).expect("weights");
    (x, w, cfg)
}
