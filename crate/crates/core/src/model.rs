//! Fusion, prediction head and loss assembly.
//!
//! Per-region head outputs are laid out `[R, S·C]` with `R = B·N`; they are
//! rearranged into `S×N×C` forecasts outside the tape, which leaves the
//! mean-reduced loss unchanged.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cdesolve::GradientMode;
use crate::data::{denormalize, NormStats, WindowSample};
use crate::dynamics::{
    encode_plain, encode_tape, encoder_adjoint, init_encoder_params, BatchPaths, Correction, EncoderConfig,
    EncoderState, WindowPaths,
};
use crate::error::{Error, Result};
use crate::numcore::{load_checkpoint, save_checkpoint, BoundParams, ParamStore, Tape, Tensor, Var};

pub const MODEL_KIND: &str = "c3de";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over categories.
    Mean,
    /// Weighted by the causal weights of the final observation point.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Forecast horizon.
    pub s: usize,
    /// Huber threshold.
    pub delta: f64,
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.s == 0 {
            return Err(Error::invalid("forecast horizon S must be positive"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid("Huber delta must be positive"));
        }
        if self.pooling == Pooling::Causal && !self.encoder.causal {
            return Err(Error::invalid("causal pooling requires causal correction"));
        }
        Ok(())
    }
}

/// Encoder, fusion and head parameters, uniformly initialized in `±1/√fan_in`.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    init_encoder_params(&mut store, &cfg.encoder, rng);
    let h = cfg.encoder.hidden;
    let out = cfg.s * cfg.encoder.c;
    let bound = 1.0 / (h as f64).sqrt();
    let mut uni = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
    store.insert("fusion.w_x", uni(&[h, h]));
    store.insert("fusion.b_x", Tensor::zeros(&[h]));
    store.insert("fusion.w_p", uni(&[h, h]));
    store.insert("fusion.b_p", Tensor::zeros(&[h]));
    store.insert("head.w1", uni(&[h, h]));
    store.insert("head.b1", Tensor::zeros(&[h]));
    store.insert("head.w2", uni(&[h, out]));
    store.insert("head.b2", Tensor::zeros(&[out]));
    store
}

pub struct FusionVars<'a> {
    pub w_x: &'a Var,
    pub b_x: &'a Var,
    pub w_p: &'a Var,
    pub b_p: &'a Var,
}

impl<'a> FusionVars<'a> {
    pub fn from_bound(b: &'a BoundParams) -> Result<Self> {
        Ok(Self {
            w_x: b.get("fusion.w_x")?,
            b_x: b.get("fusion.b_x")?,
            w_p: b.get("fusion.w_p")?,
            b_p: b.get("fusion.b_p")?,
        })
    }
}

pub struct HeadVars<'a> {
    pub w1: &'a Var,
    pub b1: &'a Var,
    pub w2: &'a Var,
    pub b2: &'a Var,
}

impl<'a> HeadVars<'a> {
    pub fn from_bound(b: &'a BoundParams) -> Result<Self> {
        Ok(Self {
            w1: b.get("head.w1")?,
            b1: b.get("head.b1")?,
            w2: b.get("head.w2")?,
            b2: b.get("head.b2")?,
        })
    }
}

/// `σ(h_x W_x + b_x) ⊙ (pool(h_p) W_p + b_p)` with `h_x: [R, H]`, `h_p: [R, K, H]`
/// and optional pooling weights `[R, K]`.
pub fn fuse(h_x: &Var, h_p: &Var, p: &FusionVars<'_>, pool_weights: Option<&Var>) -> Result<Var> {
    let ps = h_p.shape();
    if ps.len() != 3 || h_x.shape() != [ps[0], ps[2]] {
        return Err(Error::Shape {
            op: "fuse",
            lhs: h_x.shape(),
            rhs: ps,
        });
    }
    let pooled = match pool_weights {
        None => h_p.mean_axis(1)?,
        Some(w) => h_p.mul(&w.reshape(&[ps[0], ps[1], 1])?)?.sum_axis(1)?,
    };
    let gate = h_x.matmul(p.w_x)?.add(p.b_x)?.sigmoid()?;
    gate.mul(&pooled.matmul(p.w_p)?.add(p.b_p)?)
}

/// Two-layer perceptron `σ(H W₁ + b₁) W₂ + b₂`, giving `[R, S·C]`.
pub fn predict_head(fused: &Var, p: &HeadVars<'_>) -> Result<Var> {
    fused.matmul(p.w1)?.add(p.b1)?.sigmoid()?.matmul(p.w2)?.add(p.b2)
}

/// Mean Huber loss over all elements.
pub fn huber(y: &Var, yhat: &Var, delta: f64) -> Result<Var> {
    if y.shape() != yhat.shape() {
        return Err(Error::Shape {
            op: "huber",
            lhs: y.shape(),
            rhs: yhat.shape(),
        });
    }
    yhat.sub(y)?.huber(delta)?.mean()
}

/// [`huber`] on plain tensors.
pub fn huber_loss(y: &Tensor, yhat: &Tensor, delta: f64) -> Result<f64> {
    if y.shape() != yhat.shape() {
        return Err(Error::Shape {
            op: "huber",
            lhs: y.shape().to_vec(),
            rhs: yhat.shape().to_vec(),
        });
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("Huber delta must be positive"));
    }
    let total: f64 = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(a, b)| crate::numcore::huber_value(b - a, delta))
        .sum();
    Ok(total / y.len() as f64)
}

/// A window with its fitted control paths.
#[derive(Clone, Debug)]
pub struct PreparedWindow {
    pub paths: WindowPaths,
    /// Normalized `S×N×C` target.
    pub target: Tensor,
    pub anchor_day: usize,
}

pub fn prepare(windows: &[WindowSample]) -> Result<Vec<PreparedWindow>> {
    windows
        .iter()
        .map(|w| {
            Ok(PreparedWindow {
                paths: WindowPaths::fit(&w.flow_window, &w.poi_window)?,
                target: w.target.clone(),
                anchor_day: w.anchor_day,
            })
        })
        .collect()
}

/// `S×N×C` targets of a batch as `[B·N, S·C]`.
fn targets_to_rows(batch: &[&PreparedWindow], n: usize, s: usize, c: usize) -> Tensor {
    let mut out = Vec::with_capacity(batch.len() * n * s * c);
    for w in batch {
        let t = w.target.data();
        for node in 0..n {
            for step in 0..s {
                let at = (step * n + node) * c;
                out.extend_from_slice(&t[at..at + c]);
            }
        }
    }
    Tensor::raw(vec![batch.len() * n, s * c], out)
}

/// Inverse of [`targets_to_rows`].
fn rows_to_forecasts(rows: &Tensor, batch: usize, n: usize, s: usize, c: usize) -> Vec<Tensor> {
    let d = rows.data();
    (0..batch)
        .map(|b| {
            let mut out = vec![0.0; s * n * c];
            for node in 0..n {
                for step in 0..s {
                    let src = ((b * n + node) * s + step) * c;
                    let dst = (step * n + node) * c;
                    out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                }
            }
            Tensor::raw(vec![s, n, c], out)
        })
        .collect()
}

pub struct ForwardOutput {
    pub loss: f64,
    /// Gradients in parameter-store order (empty for evaluation passes).
    pub grads: Vec<Tensor>,
    /// `S×N×C` per window, denormalized when statistics are supplied.
    pub forecasts: Vec<Tensor>,
    pub state: EncoderState<Tensor>,
}

fn check_batch<'a>(batch: &'a [&PreparedWindow], cfg: &ModelConfig) -> Result<Vec<WindowPaths>> {
    let e = &cfg.encoder;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for w in batch {
        if w.target.shape() != [cfg.s, e.n, e.c] {
            return Err(Error::Shape {
                op: "target",
                lhs: w.target.shape().to_vec(),
                rhs: vec![cfg.s, e.n, e.c],
            });
        }
    }
    Ok(batch.iter().map(|w| w.paths.clone()).collect())
}

fn finish(
    head_out: Tensor,
    batch: usize,
    cfg: &ModelConfig,
    stats: Option<&NormStats>,
) -> Result<Vec<Tensor>> {
    let e = &cfg.encoder;
    let mut f = rows_to_forecasts(&head_out, batch, e.n, cfg.s, e.c);
    if let Some(stats) = stats {
        f = f.iter().map(|t| denormalize(t, stats)).collect::<Result<_>>()?;
    }
    Ok(f)
}

/// Builds fusion, head and loss on `tape` from terminal encoder states.
fn head_loss(
    bound: &BoundParams,
    h_x: &Var,
    h_p: &Var,
    schedule: &[Tensor],
    targets: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let tape = h_x.tape();
    let e = &cfg.encoder;
    let rows = h_x.shape()[0];
    let h_p3 = h_p.reshape(&[rows, e.k, e.hidden])?;
    let pool = match cfg.pooling {
        Pooling::Mean => None,
        Pooling::Causal => Some(tape.constant(
            schedule
                .last()
                .ok_or_else(|| Error::invalid("causal pooling without a causal schedule"))?
                .clone(),
        )),
    };
    let fused = fuse(h_x, &h_p3, &FusionVars::from_bound(bound)?, pool.as_ref())?;
    let out = predict_head(&fused, &HeadVars::from_bound(bound)?)?;
    let loss = huber(&tape.constant(targets.clone()), &out, cfg.delta)?;
    Ok((loss, out))
}

/// Loss, parameter gradients and forecasts for one batch.
pub fn forward_loss(
    params: &ParamStore,
    batch: &[&PreparedWindow],
    correction: Correction<'_>,
    cfg: &ModelConfig,
    mode: GradientMode,
    stats: Option<&NormStats>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let windows = check_batch(batch, cfg)?;
    let paths = BatchPaths::new(&windows, &cfg.encoder)?;
    let targets = targets_to_rows(batch, cfg.encoder.n, cfg.s, cfg.encoder.c);
    match mode {
        GradientMode::BackpropThroughSolver => {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let st = encode_tape(&tape, &bound, paths, correction, &cfg.encoder)?;
            let (loss, out) = head_loss(&bound, &st.h_x, &st.h_p, &st.causal_schedule, &targets, cfg)?;
            loss.backward()?;
            let value = loss.value().item()?;
            let grads = bound.grads();
            let state = EncoderState {
                h_x: st.h_x.value(),
                h_p: st.h_p.value(),
                causal_schedule: st.causal_schedule,
                causal_steps: st.causal_steps,
                obs_times_flow: st.obs_times_flow,
                obs_times_poi: st.obs_times_poi,
                nfe: st.nfe,
            };
            Ok(ForwardOutput {
                loss: value,
                grads,
                forecasts: finish(out.value(), batch.len(), cfg, stats)?,
                state,
            })
        }
        GradientMode::Adjoint => {
            let st = encode_plain(params, paths, correction, &cfg.encoder)?;
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let hx = tape.param(st.h_x.clone());
            let hp = tape.param(st.h_p.clone());
            let (loss, out) = head_loss(&bound, &hx, &hp, &st.causal_schedule, &targets, cfg)?;
            loss.backward()?;
            let gx = hx.grad().unwrap_or_else(|| Tensor::zeros(st.h_x.shape()));
            let gp = hp.grad().unwrap_or_else(|| Tensor::zeros(st.h_p.shape()));
            let mut grads = bound.grads();
            for (name, g) in encoder_adjoint(params, paths, &cfg.encoder, &st, &gx, &gp)? {
                let i = params
                    .names()
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
                grads[i] = g;
            }
            Ok(ForwardOutput {
                loss: loss.value().item()?,
                grads,
                forecasts: finish(out.value(), batch.len(), cfg, stats)?,
                state: st,
            })
        }
    }
}

/// Forward pass without gradients.
pub fn forward_eval(
    params: &ParamStore,
    batch: &[&PreparedWindow],
    correction: Correction<'_>,
    cfg: &ModelConfig,
    stats: Option<&NormStats>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let windows = check_batch(batch, cfg)?;
    let paths = BatchPaths::new(&windows, &cfg.encoder)?;
    let targets = targets_to_rows(batch, cfg.encoder.n, cfg.s, cfg.encoder.c);
    let st = encode_plain(params, paths, correction, &cfg.encoder)?;
    let tape = Tape::new();
    let bound = params.bind_constant(&tape);
    let hx = tape.constant(st.h_x.clone());
    let hp = tape.constant(st.h_p.clone());
    let (loss, out) = head_loss(&bound, &hx, &hp, &st.causal_schedule, &targets, cfg)?;
    Ok(ForwardOutput {
        loss: loss.value().item()?,
        grads: Vec::new(),
        forecasts: finish(out.value(), batch.len(), cfg, stats)?,
        state: st,
    })
}

/// Trained model parameters with their configuration.
#[derive(Clone, Debug)]
pub struct C3de {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl C3de {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, rng);
        Ok(Self { config, params })
    }

    pub fn save(&self, dir: &Path, stem: &str, extra: serde_json::Value) -> Result<()> {
        let hyper = serde_json::json!({ "model": self.config, "extra": extra });
        save_checkpoint(dir, stem, MODEL_KIND, &self.params, &hyper)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, serde_json::Value)> {
        let (params, hyper) = load_checkpoint(dir, stem, MODEL_KIND)?;
        let config: ModelConfig = serde_json::from_value(hyper["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))?;
        let expected = init_params(&config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, configuration implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok((Self { config, params }, hyper["extra"].clone()))
    }
}
