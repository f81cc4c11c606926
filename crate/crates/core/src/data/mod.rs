//! Series ingestion, splits, standardisation, RevIN and patch tokens.

pub mod synthetic;

use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec};

/// Floor applied to every standard deviation.
pub const STD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    /// `L × C`, time along rows.
    pub values: Tensor,
    pub columns: Vec<String>,
    pub freq: String,
    pub splits: Option<Splits>,
    /// Train-split statistics, empty before standardisation.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SeriesDataset {
    pub fn new(values: Tensor, columns: Vec<String>, freq: impl Into<String>) -> Result<Self> {
        if values.rank() != 2 || values.rows() == 0 || values.cols() == 0 {
            return Err(Error::EmptyData(format!("series of shape {:?}", values.shape())));
        }
        if columns.len() != values.cols() {
            return Err(Error::shape(
                "dataset",
                format!("{} names for {} columns", columns.len(), values.cols()),
            ));
        }
        Ok(SeriesDataset {
            values,
            columns,
            freq: freq.into(),
            splits: None,
            mean: Vec::new(),
            std: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Writes a header row of column names followed by the values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for i in 0..self.len() {
            w.write_record(self.values.row(i).iter().map(|x| x.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn looks_like_time_header(h: &str) -> bool {
    matches!(
        h.trim().to_ascii_lowercase().as_str(),
        "date" | "time" | "timestamp" | "datetime"
    )
}

/// Reads a CSV with a header row. A leading timestamp column (by header name,
/// or because its first cell is not a number) is dropped.
pub fn load_csv(path: &Path) -> Result<SeriesDataset> {
    let shown = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: shown.clone(),
                row: 0,
                col: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut records = Vec::new();
    for rec in rdr.records() {
        records.push(rec?);
    }
    if header.is_empty() || records.is_empty() {
        return Err(Error::EmptyData(format!("{shown} has no data rows")));
    }
    let skip = looks_like_time_header(&header[0])
        || records[0]
            .get(0)
            .is_some_and(|c| c.trim().parse::<f64>().is_err() && !c.trim().is_empty());
    let start = usize::from(skip);
    let c = header.len() - start;
    if c == 0 {
        return Err(Error::EmptyData(format!("{shown} has no numeric columns")));
    }
    let mut data = Vec::with_capacity(records.len() * c);
    for (i, rec) in records.iter().enumerate() {
        // Row numbers count the header as row 1, like a spreadsheet.
        let row = i + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: shown,
                row,
                col: rec.len().min(header.len()) + 1,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for j in start..header.len() {
            let cell = rec.get(j).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: shown.clone(),
                row,
                col: j + 1,
                msg: if cell.is_empty() {
                    format!("missing value in column `{}`", header[j])
                } else {
                    format!("`{cell}` in column `{}` is not a number", header[j])
                },
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: shown,
                    row,
                    col: j + 1,
                    msg: format!("non-finite value in column `{}`", header[j]),
                });
            }
            data.push(v);
        }
    }
    let values = Tensor::new(vec![records.len(), c], data)?;
    SeriesDataset::new(values, header[start..].to_vec(), "unknown")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPreset {
    /// 70 / 10 / 20 percent.
    Generic,
    /// 12 / 4 / 4 months of hourly rows.
    EttHourly,
    /// 12 / 4 / 4 months of 15-minute rows.
    EttMinute,
    /// Explicit train and validation fractions; the rest is test.
    Ratios { train: f64, val: f64 },
}

impl FromStr for SplitPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(SplitPreset::Generic),
            "ett-hourly" => Ok(SplitPreset::EttHourly),
            "ett-minute" => Ok(SplitPreset::EttMinute),
            _ => Err(Error::InvalidConfig(format!("unknown split preset `{s}`"))),
        }
    }
}

pub fn split_ranges(len: usize, preset: SplitPreset) -> Result<Splits> {
    let by_rows = |month: usize| -> Result<Splits> {
        let (a, b, c) = (12 * month, 16 * month, 20 * month);
        if len < c {
            return Err(Error::InvalidConfig(format!(
                "ETT split needs {c} rows, series has {len}"
            )));
        }
        Ok(Splits {
            train: 0..a,
            val: a..b,
            test: b..c,
        })
    };
    let (tr, va) = match preset {
        SplitPreset::EttHourly => return by_rows(30 * 24),
        SplitPreset::EttMinute => return by_rows(30 * 24 * 4),
        SplitPreset::Generic => (0.7, 0.1),
        SplitPreset::Ratios { train, val } => (train, val),
    };
    if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratios {tr} / {va} must be positive and sum to at most 1"
        )));
    }
    let a = (len as f64 * tr).round() as usize;
    let b = (len as f64 * (tr + va)).round() as usize;
    if a == 0 {
        return Err(Error::EmptyData("train split is empty".into()));
    }
    Ok(Splits {
        train: 0..a,
        val: a..b,
        test: b..len,
    })
}

fn column_stats(values: &Tensor, rows: Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let c = values.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; c];
    for i in rows.clone() {
        for (m, x) in mean.iter_mut().zip(values.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for i in rows {
        for ((v, x), m) in var.iter_mut().zip(values.row(i)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_EPS)).collect();
    (mean, std)
}

/// Splits and z-scores every row with statistics of the train rows only.
pub fn split_standardize(mut ds: SeriesDataset, preset: SplitPreset) -> Result<SeriesDataset> {
    let splits = split_ranges(ds.len(), preset)?;
    let (mean, std) = column_stats(&ds.values, splits.train.clone());
    let c = ds.channels();
    for i in 0..ds.len() {
        let row = ds.values.row_mut(i);
        for j in 0..c {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    ds.splits = Some(splits);
    ds.mean = mean;
    ds.std = std;
    Ok(ds)
}

/// Per-channel window statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Normalises each column of an `L × C` window by its own mean and
/// population std (floored at [`STD_EPS`]).
pub fn revin_normalize(window: &Tensor) -> Result<(Tensor, RevinState)> {
    if window.rank() != 2 || window.rows() == 0 {
        return Err(Error::EmptyData(format!("window of shape {:?}", window.shape())));
    }
    let (mean, std) = column_stats(window, 0..window.rows());
    let c = window.cols();
    let out = Tensor::from_fn2(window.rows(), c, |i, j| (window.at(i, j) - mean[j]) / std[j]);
    Ok((out, RevinState { mean, std }))
}

/// Inverse of [`revin_normalize`] for any `L × C` block.
pub fn revin_denormalize(x: &Tensor, state: &RevinState) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != state.mean.len() {
        return Err(Error::shape(
            "revin",
            format!("{:?} with {} channels", x.shape(), state.mean.len()),
        ));
    }
    Ok(Tensor::from_fn2(x.rows(), x.cols(), |i, j| {
        x.at(i, j) * state.std[j] + state.mean[j]
    }))
}

/// Front padding and token count for a lookback of `l_i` steps.
pub fn token_layout(l_i: usize, l_p: usize) -> Result<(usize, usize)> {
    if l_i == 0 || l_p == 0 {
        return Err(Error::InvalidConfig(format!(
            "lookback {l_i} and patch length {l_p} must be positive"
        )));
    }
    let pad = (l_p - l_i % l_p) % l_p;
    Ok((pad, (l_i + pad) / l_p))
}

/// Tokens for one window, one sequence per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `[C, N, L_P]`.
    pub tokens: Tensor,
    /// `[C, N, L_P]`: token `n + 1` for `n < N - 1`, the normalised future
    /// patch for the last position.
    pub targets: Option<Tensor>,
    pub revin: RevinState,
    pub pad: usize,
}

/// RevIN-normalises a `L_I × C` window, zero-pads it at the front and cuts
/// non-overlapping patches. `future` (`L_P × C`) supplies the last target.
pub fn patchify(window: &Tensor, future: Option<&Tensor>, l_p: usize) -> Result<PatchBatch> {
    let (norm, revin) = revin_normalize(window)?;
    let (l_i, c) = (window.rows(), window.cols());
    let (pad, n) = token_layout(l_i, l_p)?;
    let mut tok = vec![0.0; c * n * l_p];
    for ch in 0..c {
        for t in 0..l_i {
            tok[ch * n * l_p + pad + t] = norm.at(t, ch);
        }
    }
    let targets = match future {
        None => None,
        Some(f) => {
            if f.rank() != 2 || f.rows() != l_p || f.cols() != c {
                return Err(Error::shape(
                    "patchify",
                    format!("future {:?}, expected [{l_p}, {c}]", f.shape()),
                ));
            }
            let fnorm = Tensor::from_fn2(l_p, c, |i, j| (f.at(i, j) - revin.mean[j]) / revin.std[j]);
            let mut tg = vec![0.0; c * n * l_p];
            for ch in 0..c {
                let base = ch * n * l_p;
                tg[base..base + (n - 1) * l_p].copy_from_slice(&tok[base + l_p..base + n * l_p]);
                for p in 0..l_p {
                    tg[base + (n - 1) * l_p + p] = fnorm.at(p, ch);
                }
            }
            Some(Tensor::new(vec![c, n, l_p], tg)?)
        }
    };
    Ok(PatchBatch {
        tokens: Tensor::new(vec![c, n, l_p], tok)?,
        targets,
        revin,
        pad,
    })
}

/// Drops the padding and returns the normalised `L_I × C` window.
pub fn unpatchify(batch: &PatchBatch) -> Tensor {
    let s = batch.tokens.shape();
    let (c, n, l_p) = (s[0], s[1], s[2]);
    let l_i = n * l_p - batch.pad;
    Tensor::from_fn2(l_i, c, |t, ch| batch.tokens.data()[ch * n * l_p + batch.pad + t])
}

/// Window start offsets inside `range` for lookback `l_i` plus horizon `l_p`.
pub fn window_starts(range: &Range<usize>, l_i: usize, l_p: usize, stride: usize) -> Vec<usize> {
    let need = l_i + l_p;
    if range.len() < need || stride == 0 {
        return Vec::new();
    }
    (range.start..=range.end - need).step_by(stride).collect()
}

/// Channel-independent batch: every (window, channel) pair is one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[M, N, L_P]` with `M = windows × C`, window-major.
    pub tokens: Tensor,
    pub targets: Tensor,
    /// Raw (dataset-scale) future patch per sequence, `[M, L_P]`.
    pub future: Tensor,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn assemble_batch(values: &Tensor, starts: &[usize], l_i: usize, l_p: usize) -> Result<WindowBatch> {
    let (_, n) = token_layout(l_i, l_p)?;
    let c = values.cols();
    let m = starts.len() * c;
    let (mut tok, mut tg, mut fut) = (
        Vec::with_capacity(m * n * l_p),
        Vec::with_capacity(m * n * l_p),
        Vec::with_capacity(m * l_p),
    );
    let (mut mean, mut std) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for &s in starts {
        if s + l_i + l_p > values.rows() {
            return Err(Error::shape(
                "window",
                format!("start {s} + {l_i} + {l_p} beyond {} rows", values.rows()),
            ));
        }
        let window = values.rows_range(s, s + l_i);
        let future = values.rows_range(s + l_i, s + l_i + l_p);
        let pb = patchify(&window, Some(&future), l_p)?;
        tok.extend_from_slice(pb.tokens.data());
        tg.extend_from_slice(pb.targets.as_ref().expect("targets").data());
        for ch in 0..c {
            fut.extend((0..l_p).map(|p| future.at(p, ch)));
        }
        mean.extend_from_slice(&pb.revin.mean);
        std.extend_from_slice(&pb.revin.std);
    }
    Ok(WindowBatch {
        tokens: Tensor::new(vec![m, n, l_p], tok)?,
        targets: Tensor::new(vec![m, n, l_p], tg)?,
        future: Tensor::new(vec![m, l_p], fut)?,
        mean,
        std,
    })
}
