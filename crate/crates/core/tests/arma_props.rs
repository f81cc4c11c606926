use arma_core::arma::tape::arma_attention;
use arma_core::arma::{arma_attention_layer, ma_output, ArmaConfig, AttnWeights};
use arma_core::diagnostics::random_attn_weights;
use arma_core::kernels::{AttnKind, AttnVariant};
use arma_core::ma_analysis::{
    apply_b_heads, constant_b, constant_b_theta, explicit_b_heads, implicit_theta, recover_epsilon, PhiPair,
};
use arma_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `Σ_{p≥1} B^p`, stopping once the power vanishes (B is nilpotent).
fn power_series(b: &Tensor) -> Tensor {
    let n = b.rows();
    let mut acc = b.clone();
    let mut p = b.clone();
    for _ in 1..n {
        p = p.matmul(b).unwrap();
        if p.max_abs() == 0.0 {
            break;
        }
        acc = acc.zip_map(&p, |a, x| a + x).unwrap();
    }
    acc
}

fn kind_strategy() -> impl Strategy<Value = AttnKind> {
    prop::sample::select(AttnKind::ALL.to_vec())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4).prop_flat_map(|h| (Just(h), (1usize..=32 / h).prop_map(move |hd| h * hd)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn indirect_ma_equals_explicit_b(kind in kind_strategy(), n in 2usize..=64, (h, d) in dims(), seed in any::<u64>()) {
        let variant = AttnVariant::new(kind, d, h).unwrap();
        let cfg = ArmaConfig::new(variant);
        let heads = cfg.ma_heads();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let r = Tensor::randn(&[n - 1, d], 1.0, &mut rng);
        let fast = ma_output(&q, &k, &r, heads, &cfg).unwrap();
        let bs = explicit_b_heads(&q, &k, heads, &PhiPair::default()).unwrap();
        let slow = apply_b_heads(&bs, &r).unwrap();
        prop_assert!(fast.rel_err(&slow) <= 1e-10, "{}", fast.rel_err(&slow));
    }

    #[test]
    fn b_times_r_equals_theta_times_eps(n in 2usize..=40, d in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let r = Tensor::randn(&[n, 1], 1.0, &mut rng);
        let b = explicit_b_heads(&q, &k, 1, &PhiPair::default()).unwrap().remove(0);
        let theta = implicit_theta(&b).unwrap();
        let eps = recover_epsilon(&theta, r.data()).unwrap();
        let lhs = b.matmul(&r).unwrap();
        let rhs = theta.matmul(&Tensor::new(vec![n, 1], eps).unwrap()).unwrap();
        prop_assert!(rhs.rel_err(&lhs) <= 1e-9);
    }

    #[test]
    fn theta_is_the_power_series(n in 2usize..=32, seed in any::<u64>(), scale in 0.1f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::randn(&[n, n], scale, &mut rng);
        let b = Tensor::from_fn2(n, n, |i, j| if j < i { raw.at(i, j) } else { 0.0 });
        let th = implicit_theta(&b).unwrap();
        prop_assert!(th.rel_err(&power_series(&b)) <= 1e-12);
        for i in 0..n {
            for j in i..n {
                prop_assert_eq!(th.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn constant_b_subdiagonals_decay(b in -1.99f64..-0.01, n in 2usize..=32) {
        let th = constant_b_theta(b, n).unwrap();
        for k in 2..n {
            prop_assert!(th.at(k, 0).abs() <= th.at(k - 1, 0).abs());
        }
    }

    #[test]
    fn layer_is_causal(kind in kind_strategy(), ma in any::<bool>(), n in 2usize..=12, seed in any::<u64>(), at in 0usize..12) {
        let at = at % n;
        let d = 8;
        let variant = AttnVariant::new(kind, d, 2).unwrap();
        let cfg = ArmaConfig { ma_enabled: ma, ..ArmaConfig::new(variant) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_attn_weights(&cfg, n, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut x2 = x.clone();
        for v in x2.row_mut(at) {
            *v -= 2.5;
        }
        let a = arma_attention_layer(&x, &w, &cfg).unwrap();
        let b = arma_attention_layer(&x2, &w, &cfg).unwrap();
        let taped = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone().reshaped(&[1, n, d]).unwrap()).unwrap();
            let wv = w.try_map(|p| t.constant(p.clone())).unwrap();
            let y = arma_attention(&mut t, xv, &wv, &cfg, None).unwrap();
            t.value(y).clone().reshaped(&[n, d]).unwrap()
        };
        let (ta, tb) = (taped(&x), taped(&x2));
        for t in 0..at {
            prop_assert_eq!(a.row(t), b.row(t));
            prop_assert_eq!(ta.row(t), tb.row(t));
        }
    }
}

#[test]
fn beta_sign_statistics() {
    let (n, d) = (64, 32);
    let phi = PhiPair::default();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let b = explicit_b_heads(&q, &k, 1, &phi).unwrap().remove(0);
        let entries: Vec<f64> = (1..n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| b.at(i, j)).collect();
        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
        assert!(mean < 0.0, "seed {seed}: mean beta {mean}");
        let phi_k_max = k.data().iter().map(|&x| 1.0 / (1.0 + (-phi.alpha * x / (d as f64).sqrt()).exp())).fold(0.0, f64::max);
        let q_max = q.max_abs() / (d as f64).sqrt();
        let bound = phi.slope * phi_k_max * q_max;
        let max_pos = entries.iter().copied().fold(0.0, f64::max);
        assert!(max_pos <= bound, "seed {seed}: {max_pos} > {bound}");
    }
}

#[test]
fn constant_b_closed_form_examples() {
    for b in [-0.9, -0.5, -0.1, 0.1] {
        for n in 2..=32 {
            let th = implicit_theta(&constant_b(b, n)).unwrap();
            assert!(th.max_abs_diff(&constant_b_theta(b, n).unwrap()) <= 1e-12);
        }
    }
}

#[test]
fn ar_and_arma_layers_have_equal_parameter_counts() {
    let count = |cfg: &ArmaConfig| -> usize {
        AttnWeights::<Tensor>::layout(cfg, 64)
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    };
    for kind in [AttnKind::StdSoftmax, AttnKind::Linear, AttnKind::ElementWise, AttnKind::GatedLinear] {
        for d in [8, 16, 32, 80] {
            let v = AttnVariant::new(kind, d, 8).unwrap();
            assert_eq!(count(&ArmaConfig::ar_only(v)), count(&ArmaConfig::new(v)), "{kind} d={d}");
        }
    }
}
