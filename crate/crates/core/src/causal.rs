//! Counterfactual causal-effect estimation over POI hidden states.
//!
//! At each observation point a frozen surrogate `T` is evaluated on the factual
//! hidden states (the anchor) and on `K` counterfactuals, each with one POI
//! category perturbed. The per-node absolute output differences are softmaxed
//! across categories into the weights `𝒞 ∈ ℝ^{N×K}`.
//!
//! POI hidden states are passed as `[R, K, H]` tensors where `R = B·N` rows
//! stack the regions of every window in a batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{window, DatasetBundle, Split, WindowSample};
use crate::dynamics::{encode_plain, BatchPaths, Correction, EncoderConfig, WindowPaths};
use crate::error::{Error, Result};
use crate::numcore::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, BoundParams, ParamStore, Tape,
    Tensor, Var,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Zero,
    Random,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStrategy {
    pub kind: PerturbationKind,
    /// Noise scale relative to the std of `h_p` (random kind only).
    pub random_scale: f64,
    pub seed: u64,
}

impl PerturbationStrategy {
    pub fn zero() -> Self {
        Self {
            kind: PerturbationKind::Zero,
            random_scale: 1.0,
            seed: 0,
        }
    }

    pub fn mean() -> Self {
        Self {
            kind: PerturbationKind::Mean,
            ..Self::zero()
        }
    }

    pub fn random(random_scale: f64, seed: u64) -> Self {
        Self {
            kind: PerturbationKind::Random,
            random_scale,
            seed,
        }
    }
}

fn dims3(h_p: &Tensor) -> Result<(usize, usize, usize)> {
    match *h_p.shape() {
        [r, k, h] => Ok((r, k, h)),
        _ => Err(Error::invalid(format!(
            "POI hidden state must be [R, K, H], got {:?}",
            h_p.shape()
        ))),
    }
}

/// Elementwise product with a `K×H` mask broadcast over rows (Eq. 11).
pub fn apply_mask(h_p: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (_, k, h) = dims3(h_p)?;
    if mask.shape() != [k, h] {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: h_p.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let m = mask.data();
    Ok(Tensor::raw(
        h_p.shape().to_vec(),
        h_p.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * m[i % (k * h)])
            .collect(),
    ))
}

/// Perturbs category `k` of `h_p`.
pub fn perturb(h_p: &Tensor, k: usize, strategy: &PerturbationStrategy) -> Result<Tensor> {
    perturb_stream(h_p, k, strategy, 0)
}

/// As [`perturb`], drawing random replacements from stream `stream`.
pub fn perturb_stream(h_p: &Tensor, k: usize, strategy: &PerturbationStrategy, stream: u64) -> Result<Tensor> {
    let (rows, cats, hid) = dims3(h_p)?;
    if k >= cats {
        return Err(Error::invalid(format!("category {k} out of range for K={cats}")));
    }
    match strategy.kind {
        PerturbationKind::Zero => {
            let mask = Tensor::from_fn(&[cats, hid], |i| if i / hid == k { 0.0 } else { 1.0 });
            apply_mask(h_p, &mask)
        }
        PerturbationKind::Mean => {
            if cats < 2 {
                return Err(Error::invalid("mean perturbation needs K ≥ 2"));
            }
            let mut out = h_p.clone();
            let d = out.data_mut();
            for r in 0..rows {
                let base = r * cats * hid;
                for j in 0..hid {
                    let mut s = 0.0;
                    for c in (0..cats).filter(|&c| c != k) {
                        s += d[base + c * hid + j];
                    }
                    d[base + k * hid + j] = s / (cats - 1) as f64;
                }
            }
            Ok(out)
        }
        PerturbationKind::Random => {
            if !(strategy.random_scale > 0.0) {
                return Err(Error::invalid("random_scale must be positive"));
            }
            let n = h_p.len() as f64;
            let mean = h_p.sum() / n;
            let var = h_p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = strategy.random_scale * var.sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::stream(strategy.seed, stream, k as u64));
            let mut out = h_p.clone();
            let d = out.data_mut();
            for r in 0..rows {
                for j in 0..hid {
                    let z: f64 = rng.sample(StandardNormal);
                    d[r * cats * hid + k * hid + j] = std * z;
                }
            }
            Ok(out)
        }
    }
}

/// A predictor usable as the counterfactual oracle `T`.
pub trait Surrogate {
    /// `h_x: [R, H]`, `h_p: [R, K, H]` → `R` outputs.
    fn predict(&self, h_x: &Tensor, h_p: &Tensor) -> Result<Tensor>;

    fn is_frozen(&self) -> bool;
}

fn require_frozen(s: &impl Surrogate) -> Result<()> {
    if s.is_frozen() {
        Ok(())
    } else {
        Err(Error::invalid("surrogate must be frozen before estimating causal effects"))
    }
}

fn abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, |x, y| (x - y).abs())
}

/// `|T(h_x, h_p) − T(h_x, perturb(h_p, k))|` per row (Eq. 17).
pub fn causal_effect(
    surrogate: &impl Surrogate,
    h_x: &Tensor,
    h_p: &Tensor,
    k: usize,
    strategy: &PerturbationStrategy,
) -> Result<Tensor> {
    require_frozen(surrogate)?;
    let anchor = surrogate.predict(h_x, h_p)?;
    abs_diff(&anchor, &surrogate.predict(h_x, &perturb(h_p, k, strategy)?)?)
}

/// Effects for every category, sharing one anchor evaluation.
pub fn causal_effects(
    surrogate: &impl Surrogate,
    h_x: &Tensor,
    h_p: &Tensor,
    strategy: &PerturbationStrategy,
    stream: u64,
) -> Result<Vec<Tensor>> {
    require_frozen(surrogate)?;
    let (_, cats, _) = dims3(h_p)?;
    let anchor = surrogate.predict(h_x, h_p)?;
    (0..cats)
        .map(|k| {
            let cf = surrogate.predict(h_x, &perturb_stream(h_p, k, strategy, stream)?)?;
            abs_diff(&anchor, &cf)
        })
        .collect()
}

/// Per-row softmax across the `K` effect vectors (Eq. 18), giving `R×K`.
pub fn causal_weights(effects: &[Tensor]) -> Result<Tensor> {
    let k = effects.len();
    if k == 0 {
        return Err(Error::invalid("causal_weights needs at least one category"));
    }
    let rows = effects[0].len();
    if effects.iter().any(|e| e.len() != rows) {
        return Err(Error::invalid("effect vectors differ in length"));
    }
    if effects.iter().any(|e| e.data().iter().any(|v| v.is_nan())) {
        return Err(Error::NonFinite {
            op: "causal_weights (NaN effect)".into(),
        });
    }
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let row = &mut out[r * k..(r + 1) * k];
        for (slot, e) in row.iter_mut().zip(effects) {
            *slot = e.data()[r];
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::raw(vec![rows, k], out))
}

/// Adds self-loops and row-normalizes.
pub fn normalized_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = match *a.shape() {
        [r, c] if r == c => r,
        _ => {
            return Err(Error::invalid(format!(
                "adjacency must be square, got {:?}",
                a.shape()
            )))
        }
    };
    let mut d = a.data().to_vec();
    for i in 0..n {
        d[i * n + i] += 1.0;
        let row = &mut d[i * n..(i + 1) * n];
        if row.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid(format!("negative adjacency weight in row {i}")));
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(Tensor::raw(vec![n, n], d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateDims {
    pub n: usize,
    pub k: usize,
    pub hidden: usize,
    pub width: usize,
}

/// Graph-aware surrogate: learned pooling of `h_x` and flattened `h_p` to a
/// shared width, one adjacency mixing step, then a two-layer perceptron to one
/// output per region.
#[derive(Clone, Debug)]
pub struct SurrogatePredictor {
    dims: SurrogateDims,
    adjacency: Tensor,
    params: ParamStore,
    frozen: bool,
}

impl SurrogatePredictor {
    /// `adjacency` is the raw `N×N` graph; it is normalized here.
    pub fn new(adjacency: &Tensor, k: usize, hidden: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let adjacency = normalized_adjacency(adjacency)?;
        let n = adjacency.shape()[0];
        let mut params = ParamStore::new();
        let mut uni = |shape: &[usize], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-b..b))
        };
        params.insert("pool.w_x", uni(&[hidden, width], hidden));
        params.insert("pool.w_p", uni(&[k * hidden, width], k * hidden));
        params.insert("pool.b", Tensor::zeros(&[width]));
        params.insert("mlp.w1", uni(&[width, width], width));
        params.insert("mlp.b1", Tensor::zeros(&[width]));
        params.insert("mlp.w2", uni(&[width, 1], width));
        params.insert("mlp.b2", Tensor::zeros(&[1]));
        Ok(Self {
            dims: SurrogateDims { n, k, hidden, width },
            adjacency,
            params,
            frozen: false,
        })
    }

    pub fn dims(&self) -> SurrogateDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameters; fails once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::invalid("surrogate is frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Differentiable forward on `tape` with parameters bound in `bound`.
    pub fn forward_var(&self, tape: &Tape, bound: &BoundParams, h_x: &Var, h_p: &Var) -> Result<Var> {
        let SurrogateDims { n, k, hidden, width } = self.dims;
        let xs = h_x.shape();
        let ps = h_p.shape();
        if xs.len() != 2 || xs[1] != hidden || xs[0] % n != 0 || ps != [xs[0], k, hidden] {
            return Err(Error::Shape {
                op: "surrogate",
                lhs: xs,
                rhs: ps,
            });
        }
        let rows = xs[0];
        let batch = rows / n;
        let z = h_x
            .matmul(bound.get("pool.w_x")?)?
            .add(&h_p.reshape(&[rows, k * hidden])?.matmul(bound.get("pool.w_p")?)?)?
            .add(bound.get("pool.b")?)?
            .reshape(&[batch, n, width])?;
        let mixed = tape
            .constant(self.adjacency.clone())
            .matmul(&z)?
            .reshape(&[rows, width])?;
        mixed
            .matmul(bound.get("mlp.w1")?)?
            .add(bound.get("mlp.b1")?)?
            .tanh()?
            .matmul(bound.get("mlp.w2")?)?
            .add(bound.get("mlp.b2")?)?
            .reshape(&[rows])
    }

    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        let hyper = serde_json::json!({
            "dims": self.dims,
            "adjacency": self.adjacency.data(),
            "frozen": self.frozen,
        });
        save_checkpoint(dir, stem, SURROGATE_KIND, &self.params, &hyper)
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<Self> {
        let (params, hyper) = load_checkpoint(dir, stem, SURROGATE_KIND)?;
        let bad = |m: &str| Error::Checkpoint(format!("surrogate checkpoint: {m}"));
        let dims: SurrogateDims =
            serde_json::from_value(hyper["dims"].clone()).map_err(|e| bad(&e.to_string()))?;
        let adj: Vec<f64> =
            serde_json::from_value(hyper["adjacency"].clone()).map_err(|e| bad(&e.to_string()))?;
        let adjacency = Tensor::new(&[dims.n, dims.n], adj)?;
        Ok(Self {
            dims,
            adjacency,
            params,
            frozen: hyper["frozen"].as_bool().unwrap_or(false),
        })
    }
}

pub const SURROGATE_KIND: &str = "surrogate";

impl Surrogate for SurrogatePredictor {
    fn predict(&self, h_x: &Tensor, h_p: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        self.forward_var(&tape, &bound, &tape.constant(h_x.clone()), &tape.constant(h_p.clone()))
            .map(|v| v.value())
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Effects and weights at one observation point.
#[derive(Clone, Debug)]
pub struct CausalStep {
    /// `K` vectors of length `R`.
    pub effects: Vec<Tensor>,
    /// `R×K`, rows sum to one.
    pub weights: Tensor,
}

/// Frozen surrogate plus perturbation strategy: the map `g` from hidden states
/// to causal weights.
#[derive(Clone, Debug)]
pub struct CausalEstimator {
    surrogate: SurrogatePredictor,
    strategy: PerturbationStrategy,
}

impl CausalEstimator {
    pub fn new(surrogate: SurrogatePredictor, strategy: PerturbationStrategy) -> Result<Self> {
        require_frozen(&surrogate)?;
        Ok(Self { surrogate, strategy })
    }

    pub fn surrogate(&self) -> &SurrogatePredictor {
        &self.surrogate
    }

    pub fn strategy(&self) -> &PerturbationStrategy {
        &self.strategy
    }

    /// `h_x: (B·N)×H`, `h_p: (B·N·K)×H` as laid out by the encoder.
    pub fn step(&self, h_x: Tensor, h_p: Tensor, batch: usize, obs_index: u64) -> Result<CausalStep> {
        let SurrogateDims { n, k, hidden, .. } = self.surrogate.dims;
        let rows = batch * n;
        if h_x.shape() != [rows, hidden] || h_p.shape() != [rows * k, hidden] {
            return Err(Error::Shape {
                op: "causal estimator",
                lhs: h_x.shape().to_vec(),
                rhs: h_p.shape().to_vec(),
            });
        }
        let h_p = h_p.reshape(&[rows, k, hidden])?;
        let effects = causal_effects(&self.surrogate, &h_x, &h_p, &self.strategy, obs_index)?;
        let weights = causal_weights(&effects)?;
        Ok(CausalStep { effects, weights })
    }
}

/// Per-observation-point effects and weights, averaged over the windows they
/// were collected from.
#[derive(Clone, Debug, Serialize)]
pub struct CausalEffectReport {
    pub strategy: PerturbationStrategy,
    pub windows: usize,
    /// `[obs][k]` → `N` values.
    pub effects: Vec<Vec<Vec<f64>>>,
    /// `[obs]` → `N×K` row-major.
    pub weights: Vec<Vec<f64>>,
    pub n: usize,
    pub k: usize,
}

impl CausalEffectReport {
    pub fn from_steps(strategy: PerturbationStrategy, n: usize, k: usize, steps: &[Vec<CausalStep>]) -> Result<Self> {
        let obs = steps.first().map_or(0, Vec::len);
        if steps.is_empty() || obs == 0 {
            return Err(Error::invalid("no causal steps to report"));
        }
        let mut effects = vec![vec![vec![0.0; n]; k]; obs];
        let mut weights = vec![vec![0.0; n * k]; obs];
        let mut windows = 0;
        for run in steps {
            if run.len() != obs {
                return Err(Error::invalid("inconsistent observation count across batches"));
            }
            let batch = run[0].weights.shape()[0] / n;
            windows += batch;
            for (i, st) in run.iter().enumerate() {
                for b in 0..batch {
                    for node in 0..n {
                        let r = b * n + node;
                        for c in 0..k {
                            effects[i][c][node] += st.effects[c].data()[r];
                            weights[i][node * k + c] += st.weights.data()[r * k + c];
                        }
                    }
                }
            }
        }
        let inv = 1.0 / windows as f64;
        for v in effects.iter_mut().flatten().flatten().chain(weights.iter_mut().flatten()) {
            *v *= inv;
        }
        Ok(Self {
            strategy,
            windows,
            effects,
            weights,
            n,
            k,
        })
    }

    /// Weights at observation point `obs` as `N×K`.
    pub fn weights_at(&self, obs: usize) -> Tensor {
        Tensor::raw(vec![self.n, self.k], self.weights[obs].clone())
    }

    /// Share of regions whose largest weight at the final point falls on `category`.
    pub fn top_share(&self, category: usize) -> f64 {
        let last = self.weights.last().expect("report has observation points");
        let hits = last
            .chunks(self.k)
            .filter(|row| {
                row.iter()
                    .enumerate()
                    .all(|(c, v)| c == category || *v < row[category])
            })
            .count();
        hits as f64 / self.n as f64
    }

    /// Mean weight per category at every observation point.
    pub fn mean_weights(&self) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .map(|w| {
                (0..self.k)
                    .map(|c| w.iter().skip(c).step_by(self.k).sum::<f64>() / self.n as f64)
                    .collect()
            })
            .collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        let io = |e: csv::Error| Error::data(path, e.to_string());
        w.write_record(["obs_point", "node", "category", "effect", "weight"]).map_err(io)?;
        for (i, (eff, wts)) in self.effects.iter().zip(&self.weights).enumerate() {
            for node in 0..self.n {
                for c in 0..self.k {
                    w.write_record(&[
                        (i + 1).to_string(),
                        node.to_string(),
                        c.to_string(),
                        eff[c][node].to_string(),
                        wts[node * self.k + c].to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub delta: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            width: 32,
            epochs: 30,
            batch: 64,
            adam: AdamConfig::default(),
            delta: 1.0,
            seed: 0,
        }
    }
}

/// Hidden states of one window and its next-day node totals.
#[derive(Clone, Debug)]
pub struct SurrogateSample {
    /// `N×H`
    pub h_x: Tensor,
    /// `N×K×H`
    pub h_p: Tensor,
    /// `N`
    pub target: Tensor,
}

#[derive(Clone, Debug, Serialize)]
pub struct SurrogateFit {
    pub train_loss: Vec<f64>,
    pub val_loss: f64,
    /// Huber loss of predicting zero on the validation samples.
    pub baseline_val_loss: f64,
}

fn stack(samples: &[&SurrogateSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let hx = Tensor::concat_rows(&samples.iter().map(|s| s.h_x.clone()).collect::<Vec<_>>())?;
    let hp = Tensor::concat_rows(&samples.iter().map(|s| s.h_p.clone()).collect::<Vec<_>>())?;
    let mut y = Vec::new();
    for s in samples {
        y.extend_from_slice(s.target.data());
    }
    Ok((hx, hp, Tensor::vector(y)))
}

fn huber_mean(pred: &Tensor, target: &Tensor, delta: f64) -> f64 {
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| crate::numcore::huber_value(p - t, delta))
        .sum::<f64>()
        / pred.len() as f64
}

/// Trains a surrogate on precomputed hidden states and freezes it.
pub fn fit_surrogate(
    train: &[SurrogateSample],
    val: &[SurrogateSample],
    adjacency: &Tensor,
    cfg: &SurrogateConfig,
) -> Result<(SurrogatePredictor, SurrogateFit)> {
    let first = train
        .first()
        .ok_or_else(|| Error::invalid("surrogate pretraining needs a non-empty training split"))?;
    let (_, k, hidden) = dims3(&first.h_p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "surrogate.init"));
    let mut model = SurrogatePredictor::new(adjacency, k, hidden, cfg.width, &mut rng)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "surrogate.shuffle"));
    let mut adam = AdamState::new(cfg.adam.clone(), &model.params)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle_in_place(&mut order, &mut shuffle);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let picked: Vec<&SurrogateSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (hx, hp, y) = stack(&picked)?;
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let pred = model.forward_var(&tape, &bound, &tape.constant(hx), &tape.constant(hp))?;
            let loss = pred.sub(&tape.constant(y))?.huber(cfg.delta)?.mean()?;
            loss.backward()?;
            total += loss.value().item()? * chunk.len() as f64;
            count += chunk.len();
            adam_step(&mut model.params, &bound.grads(), &mut adam)?;
        }
        let mean = total / count as f64;
        log::debug!("surrogate epoch {epoch}: train huber {mean:.6}");
        train_loss.push(mean);
    }
    model.freeze();
    let (val_loss, baseline_val_loss) = if val.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let all: Vec<&SurrogateSample> = val.iter().collect();
        let (hx, hp, y) = stack(&all)?;
        let pred = model.predict(&hx, &hp)?;
        (
            huber_mean(&pred, &y, cfg.delta),
            huber_mean(&Tensor::zeros(y.shape()), &y, cfg.delta),
        )
    };
    Ok((
        model,
        SurrogateFit {
            train_loss,
            val_loss,
            baseline_val_loss,
        },
    ))
}

fn shuffle_in_place(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Terminal hidden states of a correction-free encode for each window, paired
/// with the next-day node totals (sum over channels of the normalized target).
pub fn surrogate_samples(
    encoder_params: &ParamStore,
    encoder: &EncoderConfig,
    windows: &[WindowSample],
    batch: usize,
) -> Result<Vec<SurrogateSample>> {
    let cfg = EncoderConfig {
        causal: false,
        ..encoder.clone()
    };
    let (n, k, h, c) = (cfg.n, cfg.k, cfg.hidden, cfg.c);
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        let paths = chunk
            .iter()
            .map(|w| WindowPaths::fit(&w.flow_window, &w.poi_window))
            .collect::<Result<Vec<_>>>()?;
        let st = encode_plain(encoder_params, BatchPaths::new(&paths, &cfg)?, Correction::None, &cfg)?;
        for (b, w) in chunk.iter().enumerate() {
            let target: Vec<f64> = (0..n)
                .map(|node| w.target.data()[node * c..(node + 1) * c].iter().sum())
                .collect();
            out.push(SurrogateSample {
                h_x: st.h_x.slice_rows(b * n, n)?,
                h_p: st.h_p.slice_rows(b * n * k, n * k)?.reshape(&[n, k, h])?,
                target: Tensor::vector(target),
            });
        }
    }
    Ok(out)
}

/// Pretrains the surrogate on a normalized bundle: train-split windows for
/// fitting, validation windows for the reported loss.
pub fn pretrain_surrogate(
    bundle: &DatasetBundle,
    encoder_params: &ParamStore,
    encoder: &EncoderConfig,
    cfg: &SurrogateConfig,
) -> Result<(SurrogatePredictor, SurrogateFit)> {
    let train_w = window(bundle, encoder.t, encoder.m, 1, Split::Train)?;
    let val_w = window(bundle, encoder.t, encoder.m, 1, Split::Val).unwrap_or_default();
    let train = surrogate_samples(encoder_params, encoder, &train_w, cfg.batch)?;
    let val = surrogate_samples(encoder_params, encoder, &val_w, cfg.batch)?;
    fit_surrogate(&train, &val, &bundle.adjacency, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slices(values: &[f64], rows: usize, hid: usize) -> Tensor {
        let k = values.len();
        Tensor::from_fn(&[rows, k, hid], |i| values[(i / hid) % k])
    }

    #[test]
    fn zero_perturbation_clears_one_slice() {
        let h = Tensor::from_fn(&[2, 2, 3], |i| i as f64 + 1.0);
        let p = perturb(&h, 1, &PerturbationStrategy::zero()).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                assert_eq!(p.data()[r * 6 + j], h.data()[r * 6 + j]);
                assert_eq!(p.data()[r * 6 + 3 + j], 0.0);
            }
        }
    }

    #[test]
    fn mean_perturbation_averages_the_others() {
        let h = slices(&[0.0, 2.0, 4.0], 2, 2);
        let p = perturb(&h, 0, &PerturbationStrategy::mean()).unwrap();
        assert_eq!(p, slices(&[3.0, 2.0, 4.0], 2, 2));
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let h = Tensor::from_fn(&[3, 2, 2], |i| (i as f64).sin());
        assert_eq!(apply_mask(&h, &Tensor::ones(&[2, 2])).unwrap(), h);
    }

    #[test]
    fn perturbation_errors() {
        let h = Tensor::zeros(&[1, 2, 2]);
        assert!(perturb(&h, 2, &PerturbationStrategy::zero()).is_err());
        let single = Tensor::zeros(&[1, 1, 2]);
        assert!(perturb(&single, 0, &PerturbationStrategy::mean()).is_err());
    }

    #[test]
    fn random_perturbation_is_seeded_and_scaled() {
        let h = Tensor::from_fn(&[50, 2, 8], |i| ((i * 37) % 11) as f64 - 5.0);
        let s = PerturbationStrategy::random(0.5, 9);
        let a = perturb(&h, 1, &s).unwrap();
        assert_eq!(a, perturb(&h, 1, &s).unwrap());
        assert_ne!(a, perturb(&h, 1, &PerturbationStrategy::random(0.5, 10)).unwrap());
        let std_h = {
            let m = h.sum() / h.len() as f64;
            (h.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / h.len() as f64).sqrt()
        };
        let noise: Vec<f64> = (0..50).flat_map(|r| a.data()[r * 16 + 8..r * 16 + 16].to_vec()).collect();
        let m = noise.iter().sum::<f64>() / noise.len() as f64;
        let sd = (noise.iter().map(|v| (v - m).powi(2)).sum::<f64>() / noise.len() as f64).sqrt();
        assert!((sd / (0.5 * std_h) - 1.0).abs() < 0.15, "{sd} vs {}", 0.5 * std_h);
        for r in 0..50 {
            assert_eq!(&a.data()[r * 16..r * 16 + 8], &h.data()[r * 16..r * 16 + 8]);
        }
    }

    /// O = Σ_k w_k · mean(h_p[r, k, :])
    struct Linear {
        w: Vec<f64>,
        frozen: bool,
    }

    impl Surrogate for Linear {
        fn predict(&self, _h_x: &Tensor, h_p: &Tensor) -> Result<Tensor> {
            let (r, k, h) = dims3(h_p)?;
            Ok(Tensor::from_fn(&[r], |i| {
                (0..k)
                    .map(|c| self.w[c] * h_p.data()[i * k * h + c * h..i * k * h + (c + 1) * h].iter().sum::<f64>() / h as f64)
                    .sum()
            }))
        }
        fn is_frozen(&self) -> bool {
            self.frozen
        }
    }

    #[test]
    fn linear_surrogate_effects() {
        let s = Linear {
            w: vec![0.0, 1.0],
            frozen: true,
        };
        let h_p = Tensor::from_fn(&[3, 2, 4], |i| (i as f64 * 0.37).cos() - 0.2);
        let h_x = Tensor::zeros(&[3, 1]);
        let z = PerturbationStrategy::zero();
        let e0 = causal_effect(&s, &h_x, &h_p, 0, &z).unwrap();
        assert!(e0.data().iter().all(|v| *v == 0.0));
        let e1 = causal_effect(&s, &h_x, &h_p, 1, &z).unwrap();
        for r in 0..3 {
            let m: f64 = h_p.data()[r * 8 + 4..r * 8 + 8].iter().sum::<f64>() / 4.0;
            assert!((e1.data()[r] - m.abs()).abs() < 1e-15);
        }
        let ignore = Linear {
            w: vec![0.0, 0.0],
            frozen: true,
        };
        for e in causal_effects(&ignore, &h_x, &h_p, &z, 0).unwrap() {
            assert!(e.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn unfrozen_surrogate_is_rejected() {
        let s = Linear {
            w: vec![1.0],
            frozen: false,
        };
        let err = causal_effect(&s, &Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1, 1]), 0, &PerturbationStrategy::zero());
        assert!(err.unwrap_err().to_string().contains("frozen"));
    }

    #[test]
    fn weights_softmax_cases() {
        let w = causal_weights(&[Tensor::vector(vec![0.0, 5.0]), Tensor::vector(vec![2f64.ln(), 5.0])]).unwrap();
        assert!((w.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(&w.data()[2..], &[0.5, 0.5]);
        let nan = causal_weights(&[Tensor::raw(vec![1], vec![f64::NAN])]);
        assert!(nan.is_err());
    }

    #[test]
    fn adjacency_normalization_rows_sum_to_one() {
        let a = Tensor::new(&[3, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let n = normalized_adjacency(&a).unwrap();
        for r in 0..3 {
            let s: f64 = n.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(n.data()[8], 1.0);
    }

    #[test]
    fn surrogate_output_has_one_value_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = SurrogatePredictor::new(&Tensor::zeros(&[4, 4]), 3, 5, 6, &mut rng).unwrap();
        s.freeze();
        let out = s
            .predict(&Tensor::filled(&[8, 5], 0.1), &Tensor::filled(&[8, 3, 5], -0.2))
            .unwrap();
        assert_eq!(out.shape(), &[8]);
        assert!(s.predict(&Tensor::zeros(&[3, 5]), &Tensor::zeros(&[3, 3, 5])).is_err());
        assert!(s.clone().params_mut().is_err());
    }

    #[test]
    fn estimator_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = SurrogatePredictor::new(&Tensor::ones(&[2, 2]), 3, 4, 5, &mut rng).unwrap();
        assert!(CausalEstimator::new(s.clone(), PerturbationStrategy::zero()).is_err());
        s.freeze();
        let est = CausalEstimator::new(s, PerturbationStrategy::zero()).unwrap();
        let h_x = Tensor::from_fn(&[4, 4], |i| (i as f64).sin());
        let h_p = Tensor::from_fn(&[12, 4], |i| (i as f64 * 0.3).cos());
        let st = est.step(h_x, h_p, 2, 0).unwrap();
        assert_eq!(st.weights.shape(), &[4, 3]);
        for row in st.weights.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(st.effects.iter().flat_map(|e| e.data().to_vec()).all(|v| v >= 0.0));
    }
}
