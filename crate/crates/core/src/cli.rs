//! Command-line entry point.
//!
//! Every run writes `config_resolved.json` into its output directory; passing
//! that file back through `--config` replays the run with identical settings.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::causal::{CausalEstimator, PerturbationKind, PerturbationStrategy, SurrogateConfig, SurrogatePredictor};
use crate::cdesolve::{GradientMode, Method, SolverConfig};
use crate::data::{ha_baseline, load, save, synth_generate, NormStats, Split, SynthConfig};
use crate::dynamics::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{horizon_report, HorizonMode};
use crate::model::{ModelConfig, Pooling, C3de};
use crate::numcore::{AdamConfig, Tensor};
use crate::seed;
use crate::train::{
    causal_report, evaluate_split, pretrain_for, run_experiment, ExperimentConfig, PreparedData, TrainConfig,
};

const MODEL_STEM: &str = "model";
const SURROGATE_STEM: &str = "surrogate";

#[derive(Parser, Debug)]
#[command(name = "c3de", version, about = "Causal-aware dual neural CDE crowd-flow forecaster")]
pub struct Cli {
    /// Global seed; component seeds are derived from it by name.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replay the settings of a previous `config_resolved.json`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a planted-causality synthetic dataset.
    Synth(SynthArgs),
    /// Pretrain and freeze the causal surrogate.
    PretrainSurrogate(PretrainArgs),
    /// Train the forecaster.
    Train(TrainArgs),
    /// Write a metric report for a checkpoint or the HA baseline.
    Evaluate(EvaluateArgs),
    /// Write per-window forecasts as CSV.
    Predict(PredictArgs),
    /// Write causal effects and weights per observation point.
    CausalReport(PredictArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::PretrainSurrogate(_) => "pretrain-surrogate",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::CausalReport(_) => "causal-report",
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long, default_value_t = 720)]
    pub days: usize,
    #[arg(long, default_value_t = 30)]
    pub days_per_month: usize,
    /// Index of the category that drives flow.
    #[arg(long, default_value_t = 1)]
    pub planted: usize,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.5)]
    pub ar: f64,
    #[arg(long, default_value_t = 0.5)]
    pub walk_std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weekly: f64,
}

impl SynthArgs {
    pub fn to_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n: self.nodes,
            c: self.channels,
            k: self.categories,
            days: self.days,
            days_per_month: self.days_per_month,
            planted_category: self.planted,
            planted_strength: self.beta,
            noise_std: self.noise,
            ar_coefficient: self.ar,
            walk_std: self.walk_std,
            weekly_amplitude: self.weekly,
            seed,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Hidden size H.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Flow window T (days).
    #[arg(long = "flow-window", short = 'T', default_value_t = 14)]
    pub t: usize,
    /// POI window M (months).
    #[arg(long = "poi-window", short = 'M', default_value_t = 4)]
    pub m: usize,
    /// Forecast horizon S (days).
    #[arg(long = "horizon", short = 'S', default_value_t = 14)]
    pub s: usize,
    /// Observation points L.
    #[arg(long = "obs-points", short = 'L', default_value_t = 8)]
    pub l: usize,
    #[arg(long, value_enum, default_value_t = Method::AdaptiveRk4)]
    pub solver: Method,
    /// Step size in rescaled window time (fixed-step methods; initial step otherwise).
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
    #[arg(long, value_enum, default_value_t = GradientMode::BackpropThroughSolver)]
    pub gradient_mode: GradientMode,
    /// Drop the causal estimator (plain dual CDE).
    #[arg(long)]
    pub no_causal: bool,
    #[arg(long, value_enum, default_value_t = PerturbationKind::Zero)]
    pub strategy: PerturbationKind,
    #[arg(long, default_value_t = 1.0)]
    pub random_scale: f64,
    /// Multiply causal weights by K.
    #[arg(long)]
    pub rescale: bool,
    #[arg(long, value_enum, default_value_t = Pooling::Mean)]
    pub pooling: Pooling,
    /// Huber threshold.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
}

impl ModelArgs {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            method: self.solver,
            step_size: self.step,
            rtol: self.rtol,
            atol: self.atol,
            ..SolverConfig::default()
        }
    }

    pub fn model_config(&self, n: usize, c: usize, k: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                n,
                c,
                k,
                hidden: self.hidden,
                t: self.t,
                m: self.m,
                l: self.l,
                flow_solver: self.solver(),
                poi_solver: self.solver(),
                causal: !self.no_causal,
                rescale_weights: self.rescale,
            },
            s: self.s,
            delta: self.delta,
            pooling: self.pooling,
        }
    }

    pub fn strategy(&self, seed_value: u64) -> PerturbationStrategy {
        PerturbationStrategy {
            kind: self.strategy,
            random_scale: self.random_scale,
            seed: seed::derive(seed_value, "perturbation"),
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 32)]
    pub surrogate_width: usize,
    #[arg(long, default_value_t = 30)]
    pub surrogate_epochs: usize,
}

impl OptimArgs {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn surrogate(&self, delta: f64) -> SurrogateConfig {
        SurrogateConfig {
            width: self.surrogate_width,
            epochs: self.surrogate_epochs,
            batch: self.batch,
            adam: self.adam(),
            delta,
            seed: 0,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding a pretrained surrogate; pretrained inline when absent.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Ha,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training output directory; required unless a baseline is chosen.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = HorizonMode::Step)]
    pub horizon_mode: HorizonMode,
    /// Window lengths for the baseline (a checkpoint carries its own).
    #[arg(long = "flow-window", short = 'T', default_value_t = 14)]
    pub t: usize,
    #[arg(long = "poi-window", short = 'M', default_value_t = 4)]
    pub m: usize,
    #[arg(long = "horizon", short = 'S', default_value_t = 14)]
    pub s: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

/// Settings of one run as written to `config_resolved.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub command: Command,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn resolve(cli: &Cli) -> Result<ResolvedConfig> {
    let Some(path) = &cli.config else {
        return Ok(ResolvedConfig {
            seed: cli.seed,
            command: cli.command.clone(),
        });
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ResolvedConfig = serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
    if cfg.command.name() != cli.command.name() {
        return Err(Error::invalid(format!(
            "{} holds a `{}` configuration, not `{}`",
            path.display(),
            cfg.command.name(),
            cli.command.name()
        )));
    }
    Ok(cfg)
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let resolved = resolve(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config_resolved.json"), &resolved)?;
    let seed_value = resolved.seed;
    match &resolved.command {
        Command::Synth(a) => {
            let bundle = synth_generate(&a.to_config(seed_value))?;
            let manifest = save(&bundle, out)?;
            log::info!("wrote {}", manifest.display());
        }
        Command::PretrainSurrogate(a) => {
            let data = PreparedData::new(load(&a.data)?)?;
            let cfg = experiment_config(&a.model, &a.optim, &data, seed_value);
            if !cfg.model.encoder.causal {
                return Err(Error::invalid("pretrain-surrogate is meaningless with --no-causal"));
            }
            let (s, fit) = pretrain_for(&data, &cfg, seed_value)?;
            s.save(out, SURROGATE_STEM)?;
            write_json(&out.join("surrogate_fit.json"), &fit)?;
        }
        Command::Train(a) => train_command(a, &resolved, out, seed_value)?,
        Command::Evaluate(a) => evaluate_command(a, out)?,
        Command::Predict(a) => predict_command(a, out)?,
        Command::CausalReport(a) => causal_command(a, out)?,
    }
    Ok(())
}

fn experiment_config(model: &ModelArgs, optim: &OptimArgs, data: &PreparedData, seed_value: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: model.model_config(data.raw.n(), data.raw.c(), data.raw.k()),
        train: TrainConfig {
            epochs: optim.epochs,
            patience: optim.patience,
            batch: optim.batch,
            adam: optim.adam(),
            gradient_mode: model.gradient_mode,
            seed: seed_value,
        },
        surrogate: optim.surrogate(model.delta),
        strategy: model.strategy(seed_value),
    }
}

fn train_command(a: &TrainArgs, resolved: &ResolvedConfig, out: &Path, seed_value: u64) -> Result<()> {
    let data = PreparedData::new(load(&a.data)?)?;
    let cfg = experiment_config(&a.model, &a.optim, &data, seed_value);
    log::info!(
        "training: lr={}, weight_decay={}, batch={}, H={}, T={}, M={}, S={}, L={}, solver={:?}, step={}, causal={}",
        cfg.train.adam.lr,
        cfg.train.adam.weight_decay,
        cfg.train.batch,
        cfg.model.encoder.hidden,
        cfg.model.encoder.t,
        cfg.model.encoder.m,
        cfg.model.s,
        cfg.model.encoder.l,
        cfg.model.encoder.flow_solver.method,
        cfg.model.encoder.flow_solver.step_size,
        cfg.model.encoder.causal
    );
    let surrogate = match (&a.surrogate, cfg.model.encoder.causal) {
        (Some(dir), true) => Some(SurrogatePredictor::load(dir, SURROGATE_STEM)?),
        _ => None,
    };
    let exp = run_experiment(&data, &cfg, seed_value, surrogate)?;
    let extra = serde_json::json!({
        "strategy": cfg.strategy,
        "norm_stats": data.stats,
        "dataset": data.raw.name,
        "seed": resolved.seed,
    });
    exp.model.save(out, MODEL_STEM, extra)?;
    if let Some(est) = &exp.estimator {
        est.surrogate().save(out, SURROGATE_STEM)?;
    }
    if let Some(fit) = &exp.surrogate_fit {
        write_json(&out.join("surrogate_fit.json"), fit)?;
    }
    write_json(&out.join("training_log.json"), &exp.outcome)
}

struct Loaded {
    model: C3de,
    estimator: Option<CausalEstimator>,
}

fn load_trained(dir: &Path) -> Result<Loaded> {
    let (model, extra) = C3de::load(dir, MODEL_STEM)?;
    let estimator = if model.config.encoder.causal {
        let strategy: PerturbationStrategy = serde_json::from_value(extra["strategy"].clone())
            .map_err(|e| Error::Checkpoint(format!("strategy: {e}")))?;
        Some(CausalEstimator::new(SurrogatePredictor::load(dir, SURROGATE_STEM)?, strategy)?)
    } else {
        None
    };
    // checkpoints carry the statistics they were trained with
    let _: NormStats = serde_json::from_value(extra["norm_stats"].clone())
        .map_err(|e| Error::Checkpoint(format!("normalization statistics: {e}")))?;
    Ok(Loaded { model, estimator })
}

fn check_dims(model: &C3de, data: &PreparedData) -> Result<()> {
    let e = &model.config.encoder;
    if (e.n, e.c, e.k) != (data.raw.n(), data.raw.c(), data.raw.k()) {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects N={}, C={}, K={} but the dataset has N={}, C={}, K={}",
            e.n,
            e.c,
            e.k,
            data.raw.n(),
            data.raw.c(),
            data.raw.k()
        )));
    }
    Ok(())
}

fn evaluate_command(a: &EvaluateArgs, out: &Path) -> Result<()> {
    let data = PreparedData::new(load(&a.data)?)?;
    let report = match (a.baseline, &a.checkpoint) {
        (Some(Baseline::Ha), _) => {
            let windows = crate::data::window(&data.raw, a.t, a.m, a.s, a.split)?;
            let forecasts = ha_baseline(&data.raw, a.split, &windows)?;
            let actual: Vec<Tensor> = windows.into_iter().map(|w| w.target).collect();
            horizon_report(&actual, &forecasts, "HA", &data.raw.name, a.horizon_mode)?
        }
        (None, Some(dir)) => {
            let l = load_trained(dir)?;
            check_dims(&l.model, &data)?;
            let (raw, forecasts, _) = evaluate_split(&l.model, l.estimator.as_ref(), &data, a.split, a.batch)?;
            let actual: Vec<Tensor> = raw.into_iter().map(|w| w.target).collect();
            let label = if l.model.config.encoder.causal { "C3DE" } else { "C3DE w/o CA" };
            horizon_report(&actual, &forecasts, label, &data.raw.name, a.horizon_mode)?
        }
        (None, None) => return Err(Error::invalid("evaluate needs --checkpoint or --baseline")),
    };
    report.write_json(&out.join("report.json"))?;
    print!("{}", report.table());
    Ok(())
}

fn predict_command(a: &PredictArgs, out: &Path) -> Result<()> {
    let data = PreparedData::new(load(&a.data)?)?;
    let l = load_trained(&a.checkpoint)?;
    check_dims(&l.model, &data)?;
    let (raw, forecasts, _) = evaluate_split(&l.model, l.estimator.as_ref(), &data, a.split, a.batch)?;
    let path = out.join("forecasts.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::data(&path, e.to_string()))?;
    let io = |e: csv::Error| Error::data(&path, e.to_string());
    w.write_record(["anchor_day", "day", "step", "node", "channel", "forecast", "actual"])
        .map_err(io)?;
    for (win, f) in raw.iter().zip(&forecasts) {
        let (s, n, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        for step in 0..s {
            for node in 0..n {
                for ch in 0..c {
                    let i = (step * n + node) * c + ch;
                    w.write_record(&[
                        win.anchor_day.to_string(),
                        (win.anchor_day + step + 1).to_string(),
                        (step + 1).to_string(),
                        data.raw.node_ids[node].clone(),
                        ch.to_string(),
                        f.data()[i].to_string(),
                        win.target.data()[i].to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    log::info!("wrote {} windows to {}", forecasts.len(), path.display());
    Ok(())
}

fn causal_command(a: &PredictArgs, out: &Path) -> Result<()> {
    let data = PreparedData::new(load(&a.data)?)?;
    let l = load_trained(&a.checkpoint)?;
    check_dims(&l.model, &data)?;
    let est = l
        .estimator
        .as_ref()
        .ok_or_else(|| Error::invalid("checkpoint was trained without causal correction"))?;
    let report = causal_report(&l.model, est, &data, a.split, a.batch)?;
    report.write_csv(&out.join("causal_report.csv"))?;
    let summary = serde_json::json!({
        "strategy": report.strategy,
        "windows": report.windows,
        "categories": data.raw.category_names,
        "mean_weights": report.mean_weights(),
    });
    write_json(&out.join("causal_summary.json"), &summary)
}
