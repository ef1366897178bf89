//! Training loop, evaluation passes and the end-to-end experiment pipeline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{pretrain_surrogate, CausalEffectReport, CausalEstimator, CausalStep, PerturbationStrategy, SurrogateConfig, SurrogateFit, SurrogatePredictor};
use crate::cdesolve::GradientMode;
use crate::data::{normalize, window, DatasetBundle, NormStats, Split, WindowSample};
use crate::dynamics::Correction;
use crate::error::{Error, Result};
use crate::eval::{metrics, MetricReport};
use crate::model::{forward_eval, forward_loss, prepare, ModelConfig, PreparedWindow, C3de};
use crate::numcore::{adam_step, AdamConfig, AdamState, Tensor};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation-MAE improvement before stopping.
    pub patience: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub gradient_mode: GradientMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 10,
            batch: 64,
            adam: AdamConfig::default(),
            gradient_mode: GradientMode::BackpropThroughSolver,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

fn correction<'a>(model: &ModelConfig, estimator: Option<&'a CausalEstimator>) -> Correction<'a> {
    match (model.encoder.causal, estimator) {
        (true, Some(e)) => Correction::Estimator(e),
        _ => Correction::None,
    }
}

/// Denormalized forecasts for `windows`, plus the estimator outputs of every batch.
pub fn predict_prepared(
    model: &C3de,
    windows: &[PreparedWindow],
    estimator: Option<&CausalEstimator>,
    stats: &NormStats,
    batch: usize,
) -> Result<(Vec<Tensor>, Vec<Vec<CausalStep>>)> {
    let mut forecasts = Vec::with_capacity(windows.len());
    let mut steps = Vec::new();
    for (b, chunk) in windows.chunks(batch.max(1)).enumerate() {
        let refs: Vec<&PreparedWindow> = chunk.iter().collect();
        let out = forward_eval(&model.params, &refs, correction(&model.config, estimator), &model.config, Some(stats))
            .map_err(|e| Error::Batch {
                batch: b,
                source: Box::new(e),
            })?;
        forecasts.extend(out.forecasts);
        if !out.state.causal_steps.is_empty() {
            steps.push(out.state.causal_steps);
        }
    }
    Ok((forecasts, steps))
}

fn raw_targets(windows: &[PreparedWindow], stats: &NormStats) -> Result<Vec<Tensor>> {
    windows
        .iter()
        .map(|w| crate::data::denormalize(&w.target, stats))
        .collect()
}

fn pooled_metrics(actual: &[Tensor], forecast: &[Tensor]) -> Result<(f64, f64)> {
    let cat = |v: &[Tensor]| -> Result<Tensor> {
        let s = v[0].shape()[0];
        let per = v[0].len() / s;
        let flat: Vec<f64> = v.iter().flat_map(|t| t.data().to_vec()).collect();
        Tensor::new(&[flat.len() / per, per, 1], flat)
    };
    let (a, f) = (cat(actual)?, cat(forecast)?);
    let steps: Vec<usize> = (1..=a.shape()[0]).collect();
    let m = metrics(&a, &f, &steps)?;
    Ok((m.mae, m.rmse))
}

/// Trains with Adam and early stopping on validation MAE (original units);
/// leaves the best parameters in `model`.
pub fn train_model(
    model: &mut C3de,
    train: &[PreparedWindow],
    val: &[PreparedWindow],
    estimator: Option<&CausalEstimator>,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    if model.config.encoder.causal && estimator.is_none() {
        return Err(Error::invalid("causal correction enabled but no estimator supplied"));
    }
    let mut adam = AdamState::new(cfg.adam.clone(), &model.params)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "shuffle"));
    let val_actual = raw_targets(val, stats)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
            let refs: Vec<&PreparedWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let out = forward_loss(
                &model.params,
                &refs,
                correction(&model.config, estimator),
                &model.config,
                cfg.gradient_mode,
                None,
            )
            .map_err(|e| Error::Batch {
                batch: b,
                source: Box::new(e),
            })?;
            total += out.loss * chunk.len() as f64;
            adam_step(&mut model.params, &out.grads, &mut adam)?;
        }
        let train_loss = total / train.len() as f64;
        let (val_mae, val_rmse) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (f, _) = predict_prepared(model, val, estimator, stats, cfg.batch)?;
            pooled_metrics(&val_actual, &f)?
        };
        log::info!("epoch {epoch}: train huber {train_loss:.6}, val MAE {val_mae:.4}, val RMSE {val_rmse:.4}");
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            val_rmse,
        });
        // without validation data every epoch counts as an improvement
        if val.is_empty() || val_mae < best.0 {
            best = (val_mae, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", best.1);
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        epochs: records,
        best_epoch: best.1,
        best_val_mae: best.0,
        stopped_early,
    })
}

/// Raw and normalized views of one dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub raw: DatasetBundle,
    pub norm: DatasetBundle,
    pub stats: NormStats,
}

impl PreparedData {
    pub fn new(raw: DatasetBundle) -> Result<Self> {
        raw.validate()?;
        let norm = normalize(&raw)?;
        let stats = norm.norm_stats.clone().expect("normalize sets statistics");
        Ok(Self { raw, norm, stats })
    }

    /// Normalized windows with fitted control paths.
    pub fn prepared(&self, cfg: &ModelConfig, split: Split) -> Result<Vec<PreparedWindow>> {
        prepare(&window(&self.norm, cfg.encoder.t, cfg.encoder.m, cfg.s, split)?)
    }

    /// Windows in original units, aligned with [`Self::prepared`].
    pub fn raw_windows(&self, cfg: &ModelConfig, split: Split) -> Result<Vec<WindowSample>> {
        window(&self.raw, cfg.encoder.t, cfg.encoder.m, cfg.s, split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub surrogate: SurrogateConfig,
    pub strategy: PerturbationStrategy,
}

pub struct Experiment {
    pub model: C3de,
    pub estimator: Option<CausalEstimator>,
    pub outcome: TrainOutcome,
    pub surrogate_fit: Option<SurrogateFit>,
}

/// Seeded model initialization shared by training and standalone surrogate pretraining.
pub fn init_model(cfg: &ModelConfig, seed_value: u64) -> Result<C3de> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "init"));
    C3de::new(cfg.clone(), &mut rng)
}

/// Pretrains a surrogate on hidden states of the freshly initialized encoder.
pub fn pretrain_for(data: &PreparedData, cfg: &ExperimentConfig, seed_value: u64) -> Result<(SurrogatePredictor, SurrogateFit)> {
    let model = init_model(&cfg.model, seed_value)?;
    let surrogate_cfg = SurrogateConfig {
        seed: seed::derive(seed_value, "surrogate"),
        ..cfg.surrogate.clone()
    };
    let (s, fit) = pretrain_surrogate(&data.norm, &model.params, &cfg.model.encoder, &surrogate_cfg)?;
    log::info!(
        "surrogate: validation huber {:.6} vs predict-zero {:.6}",
        fit.val_loss,
        fit.baseline_val_loss
    );
    Ok((s, fit))
}

/// Initializes, optionally pretrains the surrogate, and trains.
pub fn run_experiment(
    data: &PreparedData,
    cfg: &ExperimentConfig,
    seed_value: u64,
    surrogate: Option<SurrogatePredictor>,
) -> Result<Experiment> {
    let mut model = init_model(&cfg.model, seed_value)?;
    let (estimator, surrogate_fit) = if cfg.model.encoder.causal {
        let (s, fit) = match surrogate {
            Some(s) => (s, None),
            None => {
                let (s, fit) = pretrain_for(data, cfg, seed_value)?;
                (s, Some(fit))
            }
        };
        (Some(CausalEstimator::new(s, cfg.strategy)?), fit)
    } else {
        (None, None)
    };
    let train = data.prepared(&cfg.model, Split::Train)?;
    let val = data.prepared(&cfg.model, Split::Val)?;
    let train_cfg = TrainConfig {
        seed: seed_value,
        ..cfg.train.clone()
    };
    let outcome = train_model(&mut model, &train, &val, estimator.as_ref(), &data.stats, &train_cfg)?;
    Ok(Experiment {
        model,
        estimator,
        outcome,
        surrogate_fit,
    })
}

/// Forecasts and actuals (original units) for every window of `split`.
pub fn evaluate_split(
    model: &C3de,
    estimator: Option<&CausalEstimator>,
    data: &PreparedData,
    split: Split,
    batch: usize,
) -> Result<(Vec<WindowSample>, Vec<Tensor>, Vec<Vec<CausalStep>>)> {
    let prepared = data.prepared(&model.config, split)?;
    let raw = data.raw_windows(&model.config, split)?;
    let (forecasts, steps) = predict_prepared(model, &prepared, estimator, &data.stats, batch)?;
    Ok((raw, forecasts, steps))
}

/// Test-split report for a trained model.
pub fn test_report(
    model: &C3de,
    estimator: Option<&CausalEstimator>,
    data: &PreparedData,
    split: Split,
    batch: usize,
    label: &str,
    mode: crate::eval::HorizonMode,
) -> Result<MetricReport> {
    let (raw, forecasts, _) = evaluate_split(model, estimator, data, split, batch)?;
    let actual: Vec<Tensor> = raw.into_iter().map(|w| w.target).collect();
    crate::eval::horizon_report(&actual, &forecasts, label, &data.raw.name, mode)
}

/// Causal effects and weights averaged over the windows of `split`.
pub fn causal_report(
    model: &C3de,
    estimator: &CausalEstimator,
    data: &PreparedData,
    split: Split,
    batch: usize,
) -> Result<CausalEffectReport> {
    if !model.config.encoder.causal {
        return Err(Error::invalid("model was built without causal correction"));
    }
    let (_, _, steps) = evaluate_split(model, Some(estimator), data, split, batch)?;
    let e = &model.config.encoder;
    CausalEffectReport::from_steps(*estimator.strategy(), e.n, e.k, &steps)
}
