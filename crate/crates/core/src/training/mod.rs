//! Training loop and evaluation.

pub mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{assemble_batch, token_layout, window_starts, SeriesDataset, WindowBatch};
use crate::error::{Error, Result};
use crate::model::ForecastModel;
use crate::rng::{self, Dropout, Stream, DEFAULT_SEED};
use crate::tensor::Tensor;

pub use optim::{lr_at, AdamW};

pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_start: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Windows per micro-batch.
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Loss multiplier of the last position; `None` means `N`.
    pub last_token_weight: Option<f64>,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// Step between consecutive validation/test windows.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 6e-4,
            lr_start: 6e-5,
            warmup_epochs: 5,
            max_epochs: 100,
            patience: 12,
            batch_size: 32,
            grad_accum_steps: 1,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            adam_eps: 1e-8,
            seed: DEFAULT_SEED,
            last_token_weight: None,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.max_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch_size and grad_accum_steps must be positive".into());
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return bad("window strides must be positive".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_start > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        if let Some(w) = self.last_token_weight {
            if !(w > 0.0) {
                return bad(format!("last_token_weight must be positive, got {w}"));
            }
        }
        Ok(())
    }

    pub fn lr(&self, epoch: f64) -> f64 {
        lr_at(
            epoch,
            self.lr_start,
            self.lr_peak,
            self.warmup_epochs as f64,
            self.max_epochs as f64,
        )
    }
}

/// Per-position loss weights: 1 everywhere except `last` at position `N-1`.
pub fn token_weights(n: usize, last: Option<f64>) -> Vec<f64> {
    let mut w = vec![1.0; n];
    if let Some(x) = w.last_mut() {
        *x = last.unwrap_or(n as f64);
    }
    w
}

/// Weighted next-patch MSE of one batch and its parameter gradients.
pub fn batch_gradients(
    model: &ForecastModel,
    batch: &WindowBatch,
    last_token_weight: Option<f64>,
    dropout: Option<&mut Dropout>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.load(&mut tape, true)?;
    let x = tape.constant(batch.tokens.clone())?;
    let y = model.forward(&mut tape, &p, x, dropout)?;
    let s = batch.tokens.shape().to_vec();
    let (m, n, lp) = (s[0], s[1], s[2]);
    let w = token_weights(n, last_token_weight);
    let wt = Tensor::new(
        vec![m, n, lp],
        (0..m * n * lp).map(|i| w[(i / lp) % n]).collect(),
    )?;
    let tgt = tape.constant(batch.targets.clone())?;
    let diff = tape.sub(y, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul_const(sq, wt)?;
    let loss = tape.mean(weighted)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = p
        .iter()
        .zip(model.params())
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Early-stopping bookkeeping on validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Records epoch `epoch`'s loss. Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Slides over `range`, forecasting the patch after each lookback with
/// `predict` (which returns RevIN-normalised `[M, L_P]` forecasts), and
/// scores the denormalised forecasts against the series values.
pub fn evaluate_with(
    mut predict: impl FnMut(&WindowBatch) -> Result<Tensor>,
    values: &Tensor,
    range: &std::ops::Range<usize>,
    l_i: usize,
    l_p: usize,
    stride: usize,
) -> Result<EvalMetrics> {
    let starts = window_starts(range, l_i, l_p, stride);
    if starts.is_empty() {
        return Err(Error::EmptyData(format!(
            "split of {} rows is shorter than lookback {l_i} + horizon {l_p}",
            range.len()
        )));
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for chunk in starts.chunks(64) {
        let batch = assemble_batch(values, chunk, l_i, l_p)?;
        let pred = predict(&batch)?;
        let m = batch.mean.len();
        if pred.shape() != [m, l_p] {
            return Err(Error::shape("evaluate", format!("forecast {:?}, expected [{m}, {l_p}]", pred.shape())));
        }
        for i in 0..m {
            for p in 0..l_p {
                let y = pred.at(i, p) * batch.std[i] + batch.mean[i];
                let e = y - batch.future.at(i, p);
                se += e * e;
                ae += e.abs();
                count += 1;
            }
        }
    }
    Ok(EvalMetrics {
        mse: se / count as f64,
        mae: ae / count as f64,
        windows: starts.len(),
    })
}

/// Model evaluation on a split range. Leaves the model untouched.
pub fn evaluate(model: &ForecastModel, values: &Tensor, range: &std::ops::Range<usize>, l_i: usize, l_p: usize, stride: usize) -> Result<EvalMetrics> {
    evaluate_with(|b| model.forecast(&b.tokens), values, range, l_i, l_p, stride)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    /// Loss of the very first optimisation step.
    pub first_step: f64,
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: String,
    pub ma_enabled: bool,
    #[serde(rename = "L_I")]
    pub l_i: usize,
    #[serde(rename = "L_P")]
    pub l_p: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub epochs_run: usize,
    pub loss_curves: LossCurves,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: ForecastModel,
    pub metrics: Metrics,
}

/// Trains on the dataset's train split (which must be standardised), with
/// early stopping on the validation split, and reports test metrics of the
/// best-validation model.
pub fn train(mut model: ForecastModel, ds: &SeriesDataset, l_i: usize, l_p: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = ds
        .splits
        .clone()
        .ok_or_else(|| Error::InvalidConfig("dataset has not been split".into()))?;
    if model.config().patch_len != l_p {
        return Err(Error::InvalidConfig(format!(
            "model patch length {} differs from L_P = {l_p}",
            model.config().patch_len
        )));
    }
    let (_, n) = token_layout(l_i, l_p)?;
    if n > model.config().max_tokens {
        return Err(Error::SequenceTooLong {
            len: n,
            max: model.config().max_tokens,
        });
    }
    let mut starts = window_starts(&splits.train, l_i, l_p, cfg.train_stride);
    if starts.is_empty() {
        return Err(Error::EmptyData("train split has no complete window".into()));
    }
    let values = &ds.values;
    let eval_split = |model: &ForecastModel, r: &std::ops::Range<usize>| -> Result<Option<EvalMetrics>> {
        if window_starts(r, l_i, l_p, cfg.eval_stride).is_empty() {
            return Ok(None);
        }
        evaluate(model, values, r, l_i, l_p, cfg.eval_stride).map(Some)
    };

    let decay: Vec<bool> = model.params().iter().map(|p| p.rank() >= 2).collect();
    let names = model.names().to_vec();
    let mut opt = AdamW::new(model.params(), cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut dropout = Dropout::new(model.config().dropout, rng::stream(cfg.seed, Stream::Dropout))?;
    let steps_per_epoch = starts.len().div_ceil(cfg.batch_size * cfg.grad_accum_steps);

    let mut curves = LossCurves::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        starts.shuffle(&mut shuffle);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (step, group) in starts.chunks(cfg.batch_size * cfg.grad_accum_steps).enumerate() {
            let lr = cfg.lr(epoch as f64 + step as f64 / steps_per_epoch as f64);
            let mut acc: Option<Vec<Tensor>> = None;
            let parts: Vec<&[usize]> = group.chunks(cfg.batch_size).collect();
            for mb in &parts {
                let batch = assemble_batch(values, mb, l_i, l_p)?;
                let (loss, grads) = match batch_gradients(&model, &batch, cfg.last_token_weight, Some(&mut dropout)) {
                    Ok(r) => r,
                    Err(e) if e.is_numerical() => {
                        return Err(Error::Diverged {
                            epoch,
                            step,
                            loss: f64::NAN,
                        })
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                if epoch == 0 && step == 0 && batches == 0 {
                    curves.first_step = loss;
                }
                sum += loss;
                batches += 1;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            for (xi, gi) in x.data_mut().iter_mut().zip(g.data()) {
                                *xi += gi;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty group");
            let k = parts.len() as f64;
            if parts.len() > 1 {
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|x| *x /= k);
                }
            }
            opt.step(model.params_mut(), &grads, &decay, &names, lr)?;
        }
        epochs_run = epoch + 1;
        let train_loss = sum / batches as f64;
        curves.train.push(train_loss);
        let val = eval_split(&model, &splits.val)?.map(|m| m.mse);
        let test = eval_split(&model, &splits.test)?.map(|m| m.mse);
        curves.val.push(val.unwrap_or(f64::NAN));
        curves.test.push(test.unwrap_or(f64::NAN));
        log::info!(
            "epoch {epochs_run}: train {train_loss:.6} val {} test {}",
            val.map_or("-".into(), |v| format!("{v:.6}")),
            test.map_or("-".into(), |v| format!("{v:.6}")),
        );
        // Without a validation split, select on the training loss.
        let (improved, stop) = stopper.update(epoch, val.unwrap_or(train_loss));
        if improved {
            best = model.clone();
        }
        if stop {
            log::info!("early stop after epoch {epochs_run}");
            break;
        }
    }
    let test = evaluate(&best, values, &splits.test, l_i, l_p, cfg.eval_stride)?;
    let mc = best.config();
    let metrics = Metrics {
        variant: mc.attn.variant.kind.as_str().to_string(),
        ma_enabled: mc.attn.ma_enabled,
        l_i,
        l_p,
        seed: cfg.seed,
        mse: test.mse,
        mae: test.mae,
        epochs_run,
        loss_curves: curves,
    };
    Ok(TrainOutcome { best, metrics })
}
