//! MAE, RMSE and MAPE over forecast horizons, in original units.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Elements with `|actual|` below this are left out of MAPE.
pub const MAPE_MASK: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every element was masked.
    pub mape: Option<f64>,
    pub mape_masked: usize,
    pub count: usize,
}

#[derive(Default)]
struct Accumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    pct_n: usize,
    masked: usize,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, y: f64, f: f64) {
        let e = f - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() < MAPE_MASK {
            self.masked += 1;
        } else {
            self.pct += e.abs() / y.abs();
            self.pct_n += 1;
        }
    }

    fn finish(&self) -> Metrics {
        let n = self.n as f64;
        Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.pct_n > 0).then(|| 100.0 * self.pct / self.pct_n as f64),
            mape_masked: self.masked,
            count: self.n,
        }
    }
}

fn accumulate(acc: &mut Accumulator, actual: &Tensor, forecast: &Tensor, steps: &[usize]) -> Result<()> {
    if actual.shape() != forecast.shape() || actual.ndim() == 0 {
        return Err(Error::Shape {
            op: "metrics",
            lhs: actual.shape().to_vec(),
            rhs: forecast.shape().to_vec(),
        });
    }
    let s = actual.shape()[0];
    let per = actual.len() / s;
    for &step in steps {
        if step == 0 || step > s {
            return Err(Error::invalid(format!("horizon step {step} outside 1..={s}")));
        }
        let r = (step - 1) * per..step * per;
        for (y, f) in actual.data()[r.clone()].iter().zip(&forecast.data()[r]) {
            acc.add(*y, *f);
        }
    }
    Ok(())
}

/// Metrics over the 1-based `horizon` steps of `S×N×C` tensors.
pub fn metrics(actual: &Tensor, forecast: &Tensor, horizon: &[usize]) -> Result<Metrics> {
    if horizon.is_empty() {
        return Err(Error::invalid("empty horizon"));
    }
    let mut acc = Accumulator::default();
    accumulate(&mut acc, actual, forecast, horizon)?;
    Ok(acc.finish())
}

/// How a horizon label maps to steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    /// "Horizon h" is step `h` alone.
    Step,
    /// "Horizon h" averages steps `1..=h`.
    Cumulative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub dataset: String,
    pub windows: usize,
    pub steps: usize,
    pub mode: HorizonMode,
    pub horizons: Vec<HorizonRow>,
    pub average: Metrics,
}

/// Horizons 7 and 14 when `S ≥ 14`, otherwise `⌈S/2⌉` and `S`.
pub fn default_horizons(s: usize) -> Vec<usize> {
    let mut h = if s >= 14 { vec![7, 14] } else { vec![s.div_ceil(2), s] };
    h.dedup();
    h
}

pub fn horizon_report(
    actuals: &[Tensor],
    forecasts: &[Tensor],
    model: &str,
    dataset: &str,
    mode: HorizonMode,
) -> Result<MetricReport> {
    if actuals.is_empty() || actuals.len() != forecasts.len() {
        return Err(Error::invalid(format!(
            "{} actual vs {} forecast windows",
            actuals.len(),
            forecasts.len()
        )));
    }
    let shape = actuals[0].shape().to_vec();
    for (i, (a, f)) in actuals.iter().zip(forecasts).enumerate() {
        if a.shape() != shape.as_slice() || f.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: if i == 0 { "horizon_report" } else { "horizon_report (shape drift)" },
                lhs: shape.clone(),
                rhs: if a.shape() != shape.as_slice() { a.shape() } else { f.shape() }.to_vec(),
            });
        }
    }
    let s = shape[0];
    let over = |steps: &[usize]| -> Result<Metrics> {
        let mut acc = Accumulator::default();
        for (a, f) in actuals.iter().zip(forecasts) {
            accumulate(&mut acc, a, f, steps)?;
        }
        Ok(acc.finish())
    };
    let horizons = default_horizons(s)
        .into_iter()
        .map(|h| {
            let steps: Vec<usize> = match mode {
                HorizonMode::Step => vec![h],
                HorizonMode::Cumulative => (1..=h).collect(),
            };
            Ok(HorizonRow {
                horizon: h,
                metrics: over(&steps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        windows: actuals.len(),
        steps: s,
        mode,
        horizons,
        average: over(&(1..=s).collect::<Vec<_>>())?,
    })
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} on {} ({} windows, S={})", self.model, self.dataset, self.windows, self.steps);
        let _ = writeln!(out, "{:<12} {:>12} {:>12} {:>10}", "", "MAE", "RMSE", "MAPE");
        let row = |out: &mut String, label: String, m: &Metrics| {
            let mape = m.mape.map_or("n/a".to_string(), |v| format!("{v:.2}%"));
            let _ = writeln!(out, "{label:<12} {:>12.4} {:>12.4} {mape:>10}", m.mae, m.rmse);
        };
        for h in &self.horizons {
            row(&mut out, format!("Horizon {}", h.horizon), &h.metrics);
        }
        row(&mut out, "Average".into(), &self.average);
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
