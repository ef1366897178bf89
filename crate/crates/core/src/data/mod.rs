//! Datasets: daily flow `X ∈ ℝ^{t′×N×C}`, monthly POI counts `P ∈ ℝ^{t″×N×K}`,
//! and a region graph `A ∈ ℝ^{N×N}`.

mod ha;
mod io;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub use ha::ha_baseline;
pub use io::{load, save, Manifest, ManifestFiles};
pub use synth::{synth_generate, SynthConfig};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Day-index boundaries: train `[0, train_end)`, val `[train_end, val_end)`,
/// test `[val_end, days)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train_end: usize,
    pub val_end: usize,
}

impl Splits {
    /// 7:1:2 chronological split.
    pub fn chronological(days: usize) -> Self {
        Self {
            train_end: days * 7 / 10,
            val_end: days * 8 / 10,
        }
    }

    pub fn range(&self, split: Split, days: usize) -> Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..days,
        }
    }
}

/// Per region-channel z-score statistics from the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// `N·C`
    pub flow_mean: Vec<f64>,
    pub flow_std: Vec<f64>,
    /// `N·K`
    pub poi_mean: Vec<f64>,
    pub poi_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    /// `days × N × C`
    pub flow: Tensor,
    /// `months × N × K`
    pub poi: Tensor,
    /// `N × N`, non-negative
    pub adjacency: Tensor,
    pub node_ids: Vec<String>,
    pub category_names: Vec<String>,
    pub day_to_month: Vec<usize>,
    pub splits: Splits,
    /// Set once the tensors have been normalized.
    pub norm_stats: Option<NormStats>,
}

impl DatasetBundle {
    pub fn days(&self) -> usize {
        self.flow.shape()[0]
    }

    pub fn months(&self) -> usize {
        self.poi.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.flow.shape()[1]
    }

    pub fn c(&self) -> usize {
        self.flow.shape()[2]
    }

    pub fn k(&self) -> usize {
        self.poi.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("dataset {}: {m}", self.name)));
        if self.flow.ndim() != 3 || self.poi.ndim() != 3 {
            return bad("flow and POI must be 3-dimensional".into());
        }
        let (days, n) = (self.days(), self.n());
        if self.poi.shape()[1] != n {
            return bad(format!("flow has {n} regions, POI has {}", self.poi.shape()[1]));
        }
        if self.adjacency.shape() != [n, n] {
            return bad(format!("adjacency is {:?}, expected [{n}, {n}]", self.adjacency.shape()));
        }
        if self.adjacency.data().iter().any(|v| *v < 0.0) {
            return bad("adjacency has negative weights".into());
        }
        if self.node_ids.len() != n || self.category_names.len() != self.k() {
            return bad("node_ids or category_names length disagrees with the tensors".into());
        }
        if self.day_to_month.len() != days {
            return bad(format!("day_to_month covers {} of {days} days", self.day_to_month.len()));
        }
        if let Some(d) = self.day_to_month.windows(2).position(|w| w[1] < w[0]) {
            return bad(format!("day_to_month decreases at day {}", d + 1));
        }
        if self.day_to_month.last().is_some_and(|&m| m >= self.months()) {
            return bad("day_to_month refers past the last POI month".into());
        }
        let s = self.splits;
        if !(0 < s.train_end && s.train_end < s.val_end && s.val_end < days) {
            return bad(format!(
                "splits must satisfy 0 < train_end < val_end < days, got {} / {} / {days}",
                s.train_end, s.val_end
            ));
        }
        Ok(())
    }
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn column_stats(t: &Tensor, rows: Range<usize>, label: &str) -> (Vec<f64>, Vec<f64>) {
    let cols = t.shape()[1] * t.shape()[2];
    let mut means = Vec::with_capacity(cols);
    let mut stds = Vec::with_capacity(cols);
    for col in 0..cols {
        let (m, s) = moments(rows.clone().map(|r| t.data()[r * cols + col]));
        if s < STD_FLOOR {
            log::warn!("{label} column {col} has zero variance on the train split; std floored");
        }
        means.push(m);
        stds.push(s.max(STD_FLOOR));
    }
    (means, stds)
}

pub fn compute_norm_stats(bundle: &DatasetBundle) -> Result<NormStats> {
    let train = bundle.splits.range(Split::Train, bundle.days());
    if train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    let (flow_mean, flow_std) = column_stats(&bundle.flow, train.clone(), "flow");
    let last_month = bundle.day_to_month[train.end - 1];
    let (poi_mean, poi_std) = column_stats(&bundle.poi, 0..last_month + 1, "poi");
    Ok(NormStats {
        flow_mean,
        flow_std,
        poi_mean,
        poi_std,
    })
}

fn affine_columns(t: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Result<Tensor> {
    let cols = mean.len();
    if t.len() % cols != 0 || t.shape().last().is_none() {
        return Err(Error::Shape {
            op: "normalize",
            lhs: t.shape().to_vec(),
            rhs: vec![cols],
        });
    }
    Ok(Tensor::raw(
        t.shape().to_vec(),
        t.data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i % cols;
                if forward {
                    (v - mean[c]) / std[c]
                } else {
                    v * std[c] + mean[c]
                }
            })
            .collect(),
    ))
}

/// Z-scores flow and POI with statistics from the train split.
pub fn normalize(bundle: &DatasetBundle) -> Result<DatasetBundle> {
    if bundle.norm_stats.is_some() {
        return Err(Error::invalid("bundle is already normalized"));
    }
    let stats = compute_norm_stats(bundle)?;
    Ok(DatasetBundle {
        flow: affine_columns(&bundle.flow, &stats.flow_mean, &stats.flow_std, true)?,
        poi: affine_columns(&bundle.poi, &stats.poi_mean, &stats.poi_std, true)?,
        norm_stats: Some(stats),
        ..bundle.clone()
    })
}

/// Maps normalized flow values `[.., N, C]` back to original units.
pub fn denormalize(forecast: &Tensor, stats: &NormStats) -> Result<Tensor> {
    affine_columns(forecast, &stats.flow_mean, &stats.flow_std, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `T × N × C`
    pub flow_window: Tensor,
    /// `M × N × K`
    pub poi_window: Tensor,
    /// `S × N × C`
    pub target: Tensor,
    /// Last input day.
    pub anchor_day: usize,
}

fn rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::raw(shape, t.data()[start * per..(start + len) * per].to_vec())
}

/// Stride-1 windows whose inputs and targets lie inside `split`. Anchors whose
/// month has fewer than `m − 1` predecessors are skipped.
pub fn window(bundle: &DatasetBundle, t: usize, m: usize, s: usize, split: Split) -> Result<Vec<WindowSample>> {
    if t == 0 || m == 0 || s == 0 {
        return Err(Error::invalid("T, M and S must be positive"));
    }
    let range = bundle.splits.range(split, bundle.days());
    if range.len() < t + s {
        return Err(Error::invalid(format!(
            "{split} split has {} days; windows need at least T+S = {}",
            range.len(),
            t + s
        )));
    }
    let mut out = Vec::new();
    for anchor in range.start + t - 1..range.end - s {
        let month = bundle.day_to_month[anchor];
        if month + 1 < m {
            continue;
        }
        out.push(WindowSample {
            flow_window: rows(&bundle.flow, anchor + 1 - t, t),
            poi_window: rows(&bundle.poi, month + 1 - m, m),
            target: rows(&bundle.flow, anchor + 1, s),
            anchor_day: anchor,
        });
    }
    if out.is_empty() {
        let first = bundle.day_to_month.iter().position(|&mo| mo + 1 >= m);
        return Err(Error::invalid(format!(
            "{split} split has no window with {m} months of POI history (first eligible day: {})",
            first.map_or("none".to_string(), |d| d.to_string())
        )));
    }
    Ok(out)
}
