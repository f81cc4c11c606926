//! Seeded synthetic series for desk-scale runs.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Seasonal,
    Arma11,
    SeasonalPlusShocks,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Seasonal => "seasonal",
            SyntheticKind::Arma11 => "arma11",
            SyntheticKind::SeasonalPlusShocks => "seasonal-plus-shocks",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seasonal" => Ok(SyntheticKind::Seasonal),
            "arma11" => Ok(SyntheticKind::Arma11),
            "seasonal-plus-shocks" => Ok(SyntheticKind::SeasonalPlusShocks),
            other => Err(Error::UnknownSeriesKind(other.to_string())),
        }
    }
}

pub const ARMA11_PHI: f64 = 0.7;
pub const ARMA11_THETA: f64 = -0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub length: usize,
    pub channels: usize,
    /// Std of the additive noise of the seasonal kinds.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, length: usize, channels: usize) -> Self {
        SyntheticSpec {
            kind,
            length,
            channels,
            noise: default_noise(),
        }
    }
}

fn seasonal(len: usize, c: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..c)
        .map(|_| {
            let p1: f64 = rng.random::<f64>() * TAU;
            let p2: f64 = rng.random::<f64>() * TAU;
            let a1 = 1.0 + rng.random::<f64>();
            let a2 = 0.5 + 0.5 * rng.random::<f64>();
            (0..len)
                .map(|t| {
                    let t = t as f64;
                    let e: f64 = StandardNormal.sample(rng);
                    a1 * (TAU * t / 24.0 + p1).sin() + a2 * (TAU * t / 168.0 + p2).sin() + noise * e
                })
                .collect()
        })
        .collect()
}

/// Sum of a daily and a weekly sinusoid plus noise (`seasonal`); the ARMA(1,1)
/// `x_t = 0.7 x_{t-1} + e_t - 0.5 e_{t-1}` (`arma11`); or seasonal data with
/// sparse shocks that decay geometrically (`seasonal-plus-shocks`).
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SeriesDataset> {
    if spec.length == 0 || spec.channels == 0 {
        return Err(Error::EmptyData(format!(
            "synthetic series of length {} with {} channels",
            spec.length, spec.channels
        )));
    }
    let (len, c) = (spec.length, spec.channels);
    let mut rng = rng::stream(seed, Stream::Data);
    let cols: Vec<Vec<f64>> = match spec.kind {
        SyntheticKind::Seasonal => seasonal(len, c, spec.noise, &mut rng),
        SyntheticKind::Arma11 => (0..c)
            .map(|_| {
                let (mut x, mut e_prev) = (0.0, 0.0);
                (0..len)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = ARMA11_PHI * x + e + ARMA11_THETA * e_prev;
                        e_prev = e;
                        x
                    })
                    .collect()
            })
            .collect(),
        SyntheticKind::SeasonalPlusShocks => {
            let mut base = seasonal(len, c, spec.noise, &mut rng);
            for col in &mut base {
                let mut shock = 0.0;
                for x in col.iter_mut() {
                    shock *= 0.8;
                    if rng.random::<f64>() < 0.01 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        shock += 2.0 * z;
                    }
                    *x += shock;
                }
            }
            base
        }
    };
    let values = Tensor::from_fn2(len, c, |t, j| cols[j][t]);
    let names = (0..c).map(|j| format!("ch{j}")).collect();
    SeriesDataset::new(values, names, spec.kind.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_series() {
        let s = SyntheticSpec::new(SyntheticKind::SeasonalPlusShocks, 300, 2);
        assert_eq!(gen_synthetic(&s, 9).unwrap(), gen_synthetic(&s, 9).unwrap());
        assert_ne!(gen_synthetic(&s, 9).unwrap(), gen_synthetic(&s, 10).unwrap());
    }

    #[test]
    fn noiseless_seasonal_is_periodic() {
        let mut s = SyntheticSpec::new(SyntheticKind::Seasonal, 600, 1);
        s.noise = 0.0;
        let v = gen_synthetic(&s, 1).unwrap().values;
        for t in 0..600 - 168 {
            assert!((v.at(t, 0) - v.at(t + 168, 0)).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!(
            "random-walk".parse::<SyntheticKind>(),
            Err(Error::UnknownSeriesKind(_))
        ));
    }
}
