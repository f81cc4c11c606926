//! Acceptance run: one line per criterion, non-zero exit on any failure.

use std::fs;
use std::time::{Duration, Instant};

use arma_core::arma::{ma_output, ArmaConfig};
use arma_core::data::synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec};
use arma_core::data::{revin_denormalize, revin_normalize, split_standardize, token_layout};
use arma_core::diagnostics::{kernel_equivalence, layer_grad_check, model_grad_check, param_parity};
use arma_core::kernels::{parallel, AttnKind, AttnVariant};
use arma_core::ma_analysis::{
    apply_b_heads, constant_b, constant_b_theta, explicit_b_heads, export_weight_maps, implicit_theta, random_study,
    PhiPair,
};
use arma_core::model::checkpoint;
use arma_core::training::{train, TrainConfig};
use arma_core::{build_model, ModelConfig, SplitPreset, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Inverse of a unit lower-triangular matrix by forward substitution.
fn unit_lower_inverse(m: &Tensor) -> Tensor {
    let n = m.rows();
    let mut inv = Tensor::zeros(&[n, n]);
    for col in 0..n {
        for i in 0..n {
            let mut x = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                x -= m.at(i, k) * inv.at(k, col);
            }
            inv.set(i, col, x / m.at(i, i));
        }
    }
    inv
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let phi = PhiPair::default();
    let (mut worst_ma, mut worst_eq) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=64usize);
        let h = rng.random_range(1..=4usize);
        let d = h * rng.random_range(1..=32 / h);
        let kind = AttnKind::ALL[seed as usize % AttnKind::ALL.len()];
        let cfg = ArmaConfig::new(AttnVariant::new(kind, d, h).map_err(|e| e.to_string())?);
        let heads = cfg.ma_heads();
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let r = Tensor::randn(&[n - 1, d], 1.0, &mut rng);
        let fast = ma_output(&q, &k, &r, heads, &cfg).map_err(|e| e.to_string())?;
        let bs = explicit_b_heads(&q, &k, heads, &phi).map_err(|e| e.to_string())?;
        let br = apply_b_heads(&bs, &r).map_err(|e| e.to_string())?;
        worst_ma = worst_ma.max(fast.rel_err(&br));

        // Θ = B (I - B)^-1 and ε = (I + Θ)^-1 r from dense triangular inverses.
        let hd = d / heads;
        for (hi, b) in bs.iter().enumerate() {
            let i_minus_b = Tensor::from_fn2(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - b.at(i, j));
            let theta = b.matmul(&unit_lower_inverse(&i_minus_b)).map_err(|e| e.to_string())?;
            let i_plus_t = Tensor::from_fn2(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + theta.at(i, j));
            let inv = unit_lower_inverse(&i_plus_t);
            for c in hi * hd..(hi + 1) * hd {
                let rc = Tensor::from_fn2(n, 1, |t, _| if t < n - 1 { r.at(t, c) } else { 0.0 });
                let eps = inv.matmul(&rc).map_err(|e| e.to_string())?;
                let lhs = b.matmul(&rc).map_err(|e| e.to_string())?;
                let rhs = theta.matmul(&eps).map_err(|e| e.to_string())?;
                worst_eq = worst_eq.max(rel(rhs.data(), lhs.data()));
                let col: Vec<f64> = (0..n).map(|t| br.at(t, c)).collect();
                worst_eq = worst_eq.max(rel(rhs.data(), &col));
            }
        }
    }
    let el = t0.elapsed();
    check(
        worst_ma <= 1e-9 && worst_eq <= 1e-9 && el < Duration::from_secs(10),
        format!("100 seeds: ma_output vs B·R {worst_ma:.2e}, B·r vs Θ·ε {worst_eq:.2e} (tol 1e-9), {el:.2?} (< 10s)"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for b in [-0.9, -0.5, -0.1, 0.1] {
        for n in 2..=32 {
            let th = implicit_theta(&constant_b(b, n)).map_err(|e| e.to_string())?;
            let cf = constant_b_theta(b, n).map_err(|e| e.to_string())?;
            worst = worst.max(th.max_abs_diff(&cf));
        }
    }
    check(worst <= 1e-12, format!("closed form vs implicit Θ, max abs err {worst:.2e} (tol 1e-12)"))
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let mut causal_ok = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(1..=64usize);
        let h = rng.random_range(1..=4usize);
        let d = h * rng.random_range(1..=32 / h);
        for kind in AttnKind::ALL {
            let e = kernel_equivalence(kind, n, d, h, seed).map_err(|e| e.to_string())?;
            worst = worst.max(e.max_rel_err);
        }
        // Causality: perturb value row `at`, earlier rows must not move.
        if n >= 2 {
            let at = rng.random_range(1..n);
            let q = Tensor::randn(&[n, d], 1.0, &mut rng);
            let k = Tensor::randn(&[n, d], 1.0, &mut rng);
            let v = Tensor::randn(&[n, d], 1.0, &mut rng);
            let g: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let w = Tensor::randn(&[n, n], 1.0, &mut rng);
            let mut v2 = v.clone();
            v2.row_mut(at).iter_mut().for_each(|x| *x += 1.0);
            let heads = |kind| AttnVariant::new(kind, d, h).unwrap().head_count;
            let run = |v: &Tensor| -> Vec<Tensor> {
                vec![
                    parallel::softmax_attn(&q, &k, v, heads(AttnKind::StdSoftmax)).unwrap(),
                    parallel::linear_attn(&q, &k, v, heads(AttnKind::Linear)).unwrap(),
                    parallel::elementwise_attn(&q, &k, v).unwrap(),
                    parallel::gated_linear_attn(&q, &k, v, &g, heads(AttnKind::GatedLinear)).unwrap(),
                    parallel::fixed_attn(&w, v).unwrap(),
                ]
            };
            for (a, b) in run(&v).iter().zip(run(&v2).iter()) {
                causal_ok &= (0..at).all(|t| a.row(t) == b.row(t));
            }
        }
    }
    check(
        worst <= 1e-10 && causal_ok,
        format!("5 kernels x 100 cases, max rel err {worst:.2e} (tol 1e-10); causality exact: {causal_ok}"),
    )
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for kind in AttnKind::ALL {
        let r = layer_grad_check(kind, true, 4).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_err);
        if !r.pass {
            failed.push(format!("layer {kind}"));
        }
        for ma in [false, true] {
            let r = model_grad_check(kind, ma, 4).map_err(|e| e.to_string())?;
            worst = worst.max(r.max_rel_err);
            if !r.pass {
                failed.push(format!("model {kind} ma={ma}"));
            }
        }
    }
    check(
        failed.is_empty(),
        format!("layers + m=1 models, h=1e-5, worst rel err {worst:.2e} (tol 1e-4) failed: {failed:?}"),
    )
}

fn criterion_5() -> Outcome {
    let base = ModelConfig::new(AttnKind::Linear, 7, 96).map_err(|e| e.to_string())?;
    let rows = param_parity(&base, 8).map_err(|e| e.to_string())?;
    let gated: Vec<_> = rows.iter().filter(|r| r.kind != AttnKind::Fixed).collect();
    let ok = gated.iter().all(|r| r.ar == r.arma);
    let txt: Vec<String> = gated.iter().map(|r| format!("{} {}={}", r.kind.as_str(), r.ar, r.arma)).collect();
    check(ok, format!("AR = ARMA parameter counts: {}", txt.join(", ")))
}

fn criterion_6() -> Outcome {
    let a = token_layout(512, 96).map_err(|e| e.to_string())?;
    let b = token_layout(512, 12).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w = Tensor::randn(&[512, 7], 4.0, &mut rng).map(|x| x * 3.0 + 11.0);
        let (x, st) = revin_normalize(&w).map_err(|e| e.to_string())?;
        worst = worst.max(revin_denormalize(&x, &st).map_err(|e| e.to_string())?.max_abs_diff(&w));
    }
    check(
        a.1 == 6 && b.1 == 43 && worst <= 1e-10,
        format!("N(512,96)={} N(512,12)={}, RevIN round trip {worst:.2e} (tol 1e-10)", a.1, b.1),
    )
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let spec = SyntheticSpec::new(SyntheticKind::SeasonalPlusShocks, 8000, 3);
    let ds = gen_synthetic(&spec, 2024).map_err(|e| e.to_string())?;
    let ds = split_standardize(ds, SplitPreset::Generic).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        max_epochs: 12,
        warmup_epochs: 2,
        train_stride: 8,
        eval_stride: 8,
        ..TrainConfig::default()
    };
    let mut res = Vec::new();
    for ma in [false, true] {
        let mut mc = ModelConfig::new(AttnKind::Linear, 3, 32).map_err(|e| e.to_string())?;
        mc.num_layers = 2;
        mc.attn.ma_enabled = ma;
        let model = build_model(&mc, 2024).map_err(|e| e.to_string())?;
        let out = train(model, &ds, 256, 32, &tc).map_err(|e| e.to_string())?;
        let c = &out.metrics.loss_curves;
        let last = *c.train.last().unwrap();
        res.push((ma, c.first_step, last, out.metrics.mse, out.metrics.epochs_run));
    }
    let el = t0.elapsed();
    let converged = res.iter().all(|r| r.2 <= 0.5 * r.1 && r.4 <= 30);
    let (ar, arma) = (res[0].3, res[1].3);
    let desc: Vec<String> = res
        .iter()
        .map(|(ma, f, l, mse, e)| {
            format!("{}: loss {f:.3}->{l:.3} in {e} epochs, test MSE {mse:.4}", if *ma { "Lin+ARMA" } else { "Lin AR" })
        })
        .collect();
    check(
        converged && el < Duration::from_secs(300),
        format!(
            "{}; {el:.1?} (< 300s); ARMA <= AR: {} (informational)",
            desc.join("; "),
            arma <= ar
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let phi = PhiPair::default();
    let mut bad = Vec::new();
    let mut neg_min = 1.0f64;
    for seed in 0..20u64 {
        let report = random_study(64, 32, 1, &phi, seed).map_err(|e| e.to_string())?.remove(0);
        let stem = format!("seed{seed}");
        export_weight_maps(&report, 32, seed, dir.path(), &stem).map_err(|e| e.to_string())?;
        let text = fs::read_to_string(dir.path().join(format!("{stem}_theta.csv"))).map_err(|e| e.to_string())?;
        let theta: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        let n = theta.len();
        let profile: Vec<f64> = (1..n)
            .map(|k| (k..n).map(|i| theta[i][i - k].abs()).sum::<f64>() / (n - k) as f64)
            .collect();
        let top = profile.iter().enumerate().fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
        let lower: Vec<f64> = (1..n).flat_map(|i| theta[i][..i].to_vec()).collect();
        let neg = lower.iter().filter(|&&x| x < 0.0).count() as f64 / lower.len() as f64;
        neg_min = neg_min.min(neg);
        if top.0 != 0 || neg <= 0.5 {
            bad.push(seed);
        }
    }
    check(
        bad.is_empty(),
        format!("20 seeds, N=64 d=32 alpha=0.05: peak |θ| at offset 1, min negative share {neg_min:.3}; failing seeds {bad:?}"),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec::new(SyntheticKind::Seasonal, 900, 2);
    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let ds = gen_synthetic(&spec, 77).map_err(|e| e.to_string())?;
        let ds = split_standardize(ds, SplitPreset::Generic).map_err(|e| e.to_string())?;
        let mut mc = ModelConfig::with_dims(AttnKind::GatedLinear, 1, 2, 16, 16).map_err(|e| e.to_string())?;
        mc.max_tokens = 8;
        let model = build_model(&mc, 77).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            max_epochs: 3,
            warmup_epochs: 1,
            train_stride: 6,
            eval_stride: 6,
            seed: 77,
            ..TrainConfig::default()
        };
        let out = train(model, &ds, 64, 16, &tc).map_err(|e| e.to_string())?;
        let ck = dir.path().join(format!("{tag}.ckpt.json"));
        checkpoint::save(&out.best, &ck).map_err(|e| e.to_string())?;
        let metrics = serde_json::to_vec_pretty(&out.metrics).map_err(|e| e.to_string())?;
        Ok((metrics, fs::read(&ck).map_err(|e| e.to_string())?))
    };
    let a = run("a")?;
    let b = run("b")?;
    check(
        a == b,
        format!("two seeded runs: metrics {} bytes identical={}, checkpoint {} bytes identical={}", a.0.len(), a.0 == b.0, a.1.len(), a.1 == b.1),
    )
}

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("thread pool");
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("indirect MA oracle equivalence", criterion_1),
        ("constant-B closed form", criterion_2),
        ("recurrent = parallel kernels, causality", criterion_3),
        ("gradient checks", criterion_4),
        ("parameter parity", criterion_5),
        ("tokenization arithmetic, RevIN", criterion_6),
        ("desk-scale forecasting smoke", criterion_7),
        ("weight-map pattern", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("acceptance {}: PASS  {name}: {d}", i + 1),
            Err(d) => {
                failures += 1;
                println!("acceptance {}: FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
