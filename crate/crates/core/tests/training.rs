use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};

use arma_core::data::synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec};
use arma_core::data::{assemble_batch, split_standardize, window_starts, SeriesDataset};
use arma_core::diagnostics::{model_grad_check, small_model};
use arma_core::training::{batch_gradients, evaluate, evaluate_with, train, TrainConfig};
use arma_core::{build_model, AttnKind, Error, ForecastModel, ModelConfig, SplitPreset, Tensor};

fn seasonal(len: usize, c: usize, seed: u64) -> SeriesDataset {
    let ds = gen_synthetic(&SyntheticSpec::new(SyntheticKind::Seasonal, len, c), seed).unwrap();
    split_standardize(ds, SplitPreset::Generic).unwrap()
}

fn param_hash(m: &ForecastModel) -> u64 {
    let mut h = DefaultHasher::new();
    for p in m.params() {
        for x in p.data() {
            x.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

#[test]
fn end_to_end_gradients_every_variant() {
    for kind in AttnKind::ALL {
        for ma in [false, true] {
            let r = model_grad_check(kind, ma, 11).unwrap();
            assert!(r.pass, "{kind} ma={ma}: {}", r.max_rel_err);
        }
    }
}

#[test]
fn forward_is_deterministic_without_dropout() {
    let m = small_model(AttnKind::GatedLinear, true, 3).unwrap();
    let x = Tensor::from_fn2(8, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin()).reshaped(&[2, 4, 4]).unwrap();
    let (a, b) = (m.predict(&x).unwrap(), m.predict(&x).unwrap());
    assert_eq!(a.data(), b.data());
}

#[test]
fn accumulated_half_batches_equal_full_batch() {
    let ds = seasonal(400, 2, 1);
    let m = small_model(AttnKind::Linear, true, 5).unwrap();
    let starts = window_starts(&(0..300), 16, 4, 7);
    let starts = &starts[..8];
    let full = assemble_batch(&ds.values, starts, 16, 4).unwrap();
    let (_, g_full) = batch_gradients(&m, &full, None, None).unwrap();
    let a = assemble_batch(&ds.values, &starts[..4], 16, 4).unwrap();
    let b = assemble_batch(&ds.values, &starts[4..], 16, 4).unwrap();
    let (_, ga) = batch_gradients(&m, &a, None, None).unwrap();
    let (_, gb) = batch_gradients(&m, &b, None, None).unwrap();
    for ((f, x), y) in g_full.iter().zip(&ga).zip(&gb) {
        let avg = x.zip_map(y, |p, q| (p + q) / 2.0).unwrap();
        assert!(avg.rel_err(f) <= 1e-12, "{}", avg.rel_err(f));
    }
}

#[test]
fn unit_last_token_weight_is_plain_mse() {
    let ds = seasonal(300, 1, 2);
    let m = small_model(AttnKind::Linear, false, 5).unwrap();
    let batch = assemble_batch(&ds.values, &[0, 13, 40], 16, 4).unwrap();
    let (loss, _) = batch_gradients(&m, &batch, Some(1.0), None).unwrap();
    let pred = m.predict(&batch.tokens).unwrap();
    let mse = pred
        .data()
        .iter()
        .zip(batch.targets.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.numel() as f64;
    assert!((loss - mse).abs() <= 1e-14 * mse.max(1.0));
    let (weighted, _) = batch_gradients(&m, &batch, None, None).unwrap();
    assert!(weighted > loss);
}

#[test]
fn evaluation_leaves_weights_alone_and_matches_a_reference() {
    let ds = seasonal(500, 2, 3);
    let m = small_model(AttnKind::StdSoftmax, true, 9).unwrap();
    let test = ds.splits.clone().unwrap().test;
    let before = param_hash(&m);
    let metrics = evaluate(&m, &ds.values, &test, 16, 4, 1).unwrap();
    assert_eq!(param_hash(&m), before);

    // Dump denormalised predictions and truth, then recompute from the file.
    let mut dump = String::new();
    evaluate_with(
        |b| {
            let f = m.forecast(&b.tokens)?;
            for i in 0..b.mean.len() {
                for p in 0..4 {
                    let y = f.at(i, p) * b.std[i] + b.mean[i];
                    dump.push_str(&format!("{y:e},{:e}\n", b.future.at(i, p)));
                }
            }
            Ok(f)
        },
        &ds.values,
        &test,
        16,
        4,
        1,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.csv");
    fs::write(&path, dump).unwrap();
    let pairs: Vec<(f64, f64)> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    let mse = pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pairs.len() as f64;
    let mae = pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64;
    assert!((metrics.mse - mse).abs() <= 1e-12 * mse);
    assert!((metrics.mae - mae).abs() <= 1e-12 * mae);
}

#[test]
fn short_test_split_is_rejected() {
    let ds = seasonal(100, 1, 3);
    let m = small_model(AttnKind::Linear, true, 1).unwrap();
    let e = evaluate(&m, &ds.values, &ds.splits.unwrap().test, 16, 8, 1).unwrap_err();
    assert!(matches!(e, Error::EmptyData(_)));
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::with_dims(AttnKind::Linear, 1, 2, 16, 24).unwrap();
    c.max_tokens = 8;
    c
}

#[test]
fn seasonal_loss_halves_within_about_two_hundred_steps() {
    let ds = seasonal(2000, 1, 2024);
    let model = build_model(&tiny_config(), 2024).unwrap();
    let tc = TrainConfig {
        max_epochs: 6,
        warmup_epochs: 1,
        train_stride: 1,
        eval_stride: 4,
        ..TrainConfig::default()
    };
    // 1281 windows / 32 per step -> 41 steps per epoch, about 200 in five epochs.
    let out = train(model, &ds, 96, 24, &tc).unwrap();
    let c = &out.metrics.loss_curves;
    let fifth = c.train[4.min(c.train.len() - 1)];
    assert!(fifth <= 0.5 * c.first_step, "{} -> {fifth}", c.first_step);
    assert_eq!(c.train.len(), out.metrics.epochs_run);
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let ds = seasonal(1200, 1, 7);
    let model = build_model(&tiny_config(), 7).unwrap();
    let tc = TrainConfig {
        max_epochs: 8,
        warmup_epochs: 1,
        patience: 3,
        train_stride: 5,
        eval_stride: 3,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, 96, 24, &tc).unwrap();
    let s = ds.splits.clone().unwrap();
    let v = evaluate(&out.best, &ds.values, &s.val, 96, 24, 3).unwrap().mse;
    let min = out.metrics.loss_curves.val.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(v, min);
    let t = evaluate(&out.best, &ds.values, &s.test, 96, 24, 3).unwrap().mse;
    assert_eq!(out.metrics.mse, t);
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let ds = seasonal(600, 1, 7);
    let model = build_model(&tiny_config(), 7).unwrap();
    let tc = TrainConfig {
        lr_peak: 1e5,
        lr_start: 1e5,
        max_epochs: 3,
        warmup_epochs: 1,
        train_stride: 4,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    match train(model, &ds, 96, 24, &tc) {
        Err(Error::Diverged { loss, .. }) => assert!(!loss.is_finite() || loss > 1e6),
        Err(e) => panic!("unexpected error {e}"),
        Ok(o) => panic!("no divergence: {:?}", o.metrics.loss_curves.train),
    }
}
