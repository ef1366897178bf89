use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Splits};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seed;

/// Planted-causality generator settings.
///
/// Flow follows `X[d,n,c] = base_c(n) + β·P[month(d),n,k*]·s_c + w(d) + e[d,n,c]`
/// with `s_c = 1 + c/4`, an optional weekly term `w`, and AR(1) noise `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub days: usize,
    #[serde(alias = "months_per_period")]
    pub days_per_month: usize,
    pub planted_category: usize,
    pub planted_strength: f64,
    pub noise_std: f64,
    pub ar_coefficient: f64,
    /// Std of the monthly POI random-walk increments.
    pub walk_std: f64,
    /// Amplitude of a day-of-week sinusoid added to every series.
    pub weekly_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 20,
            c: 2,
            k: 4,
            days: 720,
            days_per_month: 30,
            planted_category: 1,
            planted_strength: 2.0,
            noise_std: 0.1,
            ar_coefficient: 0.5,
            walk_std: 0.5,
            weekly_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.k == 0 || self.days == 0 || self.days_per_month == 0 {
            return Err(Error::invalid("synth dimensions must be positive"));
        }
        if self.planted_category >= self.k {
            return Err(Error::invalid(format!(
                "planted category {} out of range for K={}",
                self.planted_category, self.k
            )));
        }
        if !(self.planted_strength >= 0.0) || !(self.noise_std >= 0.0) || !(self.walk_std >= 0.0) {
            return Err(Error::invalid("β, noise_std and walk_std must be non-negative"));
        }
        if !(self.ar_coefficient.abs() < 1.0) {
            return Err(Error::invalid("|ar_coefficient| must be below 1"));
        }
        if !self.weekly_amplitude.is_finite() {
            return Err(Error::invalid("weekly_amplitude must be finite"));
        }
        Ok(())
    }

    pub fn months(&self) -> usize {
        self.days.div_ceil(self.days_per_month)
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (n, c, k, days) = (cfg.n, cfg.c, cfg.k, cfg.days);
    let months = cfg.months();
    let rng = |name: &str| ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, name));

    let mut poi_rng = rng("synth.poi");
    let mut poi = vec![0.0; months * n * k];
    for i in 0..n * k {
        poi[i] = poi_rng.random_range(1.0..3.0);
    }
    for m in 1..months {
        for i in 0..n * k {
            let step: f64 = poi_rng.sample(StandardNormal);
            // reflecting at zero keeps counts non-negative without absorbing
            poi[m * n * k + i] = (poi[(m - 1) * n * k + i] + cfg.walk_std * step).abs();
        }
    }

    let mut base_rng = rng("synth.base");
    let base: Vec<f64> = (0..n * c).map(|_| base_rng.random_range(4.0..6.0)).collect();

    let mut noise_rng = rng("synth.noise");
    let ar = cfg.ar_coefficient;
    let stationary = cfg.noise_std / (1.0 - ar * ar).sqrt();
    let mut e: Vec<f64> = (0..n * c)
        .map(|_| stationary * noise_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let day_to_month: Vec<usize> = (0..days).map(|d| d / cfg.days_per_month).collect();
    let mut flow = vec![0.0; days * n * c];
    for d in 0..days {
        if d > 0 {
            for v in e.iter_mut() {
                *v = ar * *v + cfg.noise_std * noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
        let weekly = cfg.weekly_amplitude * (2.0 * std::f64::consts::PI * (d % 7) as f64 / 7.0).sin();
        let m = day_to_month[d];
        for node in 0..n {
            let p = poi[(m * n + node) * k + cfg.planted_category];
            for ch in 0..c {
                let i = node * c + ch;
                let scale = 1.0 + 0.25 * ch as f64;
                flow[d * n * c + i] = base[i] + cfg.planted_strength * p * scale + weekly + e[i];
            }
        }
    }

    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        adjacency[i * n + i] = 1.0;
        adjacency[i * n + (i + 1) % n] = 1.0;
        adjacency[i * n + (i + n - 1) % n] = 1.0;
    }

    let bundle = DatasetBundle {
        name: format!("synth-{}", cfg.seed),
        flow: Tensor::new(&[days, n, c], flow)?,
        poi: Tensor::new(&[months, n, k], poi)?,
        adjacency: Tensor::new(&[n, n], adjacency)?,
        node_ids: (0..n).map(|i| format!("r{i}")).collect(),
        category_names: (0..k).map(|i| format!("poi{i}")).collect(),
        day_to_month,
        splits: Splits::chronological(days),
        norm_stats: None,
    };
    Ok(bundle)
}
