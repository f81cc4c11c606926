use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `decay[i]` selects which parameters are decayed; `names`
    /// only labels errors. Nothing is modified when any gradient is bad.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], decay: &[bool], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} grads, {} state", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (g, p)) in grads.iter().zip(params.iter()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("grad {:?} for param {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let wd = if decay[i] { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params[i].data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                p[j] -= wd * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `start` to `peak` over `warmup` epochs, then cosine
/// back to `start` at `max_epochs`. `epoch` may be fractional.
pub fn lr_at(epoch: f64, start: f64, peak: f64, warmup: f64, max_epochs: f64) -> f64 {
    let e = epoch.max(0.0);
    if e < warmup {
        start + (peak - start) * e / warmup
    } else if e >= max_epochs {
        start
    } else {
        let u = (e - warmup) / (max_epochs - warmup);
        start + (peak - start) * 0.5 * (1.0 + (PI * u).cos())
    }
}
