//! The dual-path encoder.
//!
//! Both control paths are rescaled to `[0, 1]` and integrated in lockstep over
//! `L` equal segments. At the start of segment `i` the causal estimator maps the
//! current hidden states to weights `𝒞_i ∈ ℝ^{N×K}`, which scale the POI vector
//! field (broadcast along the hidden axis) until the next observation point.
//!
//! Hidden-state layouts, for a batch of `B` windows:
//! - flow: `(B·N) × H`
//! - POI: `(B·N·K) × H`, row `(b·N + n)·K + k`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{CausalEstimator, CausalStep};
use crate::cdesolve::{adjoint_backward, integrate, AdjointField, OdeState, SolverConfig};
use crate::error::{Error, Result};
use crate::numcore::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::spline::{fit_natural_cubic, SplinePath};

pub const GRU_NAMES: [&str; 9] = ["w_r", "w_z", "w_h", "u_r", "u_z", "u_h", "b_r", "b_z", "b_h"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Flow,
    Poi,
}

impl PathKind {
    pub fn prefix(self) -> &'static str {
        match self {
            PathKind::Flow => "flow",
            PathKind::Poi => "poi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Region count.
    pub n: usize,
    /// Flow feature channels per region.
    pub c: usize,
    /// POI categories.
    pub k: usize,
    pub hidden: usize,
    /// Flow window length in days.
    pub t: usize,
    /// POI window length in months.
    pub m: usize,
    /// Observation points.
    pub l: usize,
    pub flow_solver: SolverConfig,
    pub poi_solver: SolverConfig,
    /// Apply causal correction to the POI field.
    pub causal: bool,
    /// Multiply weights by `K` so that uniform weights leave the field unchanged.
    pub rescale_weights: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l < 1 || self.t < 2 || self.m < 2 || self.hidden == 0 {
            return Err(Error::invalid(format!(
                "encoder needs L ≥ 1, T ≥ 2, M ≥ 2, H > 0 (got L={}, T={}, M={}, H={})",
                self.l, self.t, self.m, self.hidden
            )));
        }
        if self.n == 0 || self.c == 0 || self.k == 0 {
            return Err(Error::invalid("encoder needs N, C, K ≥ 1"));
        }
        self.flow_solver.validate()?;
        self.poi_solver.validate()
    }

    /// Input channels of the control path driving `path`.
    pub fn input_channels(&self, path: PathKind) -> usize {
        match path {
            PathKind::Flow => self.c,
            // each (region, category) series drives its own hidden state
            PathKind::Poi => 1,
        }
    }

    /// Observation point `i` (0-based) in rescaled time.
    pub fn observation_time(&self, i: usize) -> f64 {
        i as f64 / self.l as f64
    }
}

/// Adds GRU field and initial-state parameters for both paths.
pub fn init_encoder_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let h = cfg.hidden;
    let bound = 1.0 / (h as f64).sqrt();
    let uniform = |shape: &[usize], rng: &mut dyn rand::RngCore| {
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
    };
    for path in [PathKind::Flow, PathKind::Poi] {
        let p = path.prefix();
        let cin = cfg.input_channels(path);
        for name in GRU_NAMES {
            let shape: Vec<usize> = match &name[..1] {
                "w" => vec![cin, h],
                "u" => vec![h, h],
                _ => vec![h],
            };
            store.insert(format!("{p}.gru.{name}"), uniform(&shape, rng));
        }
        store.insert(format!("{p}.init.w"), uniform(&[cin, h], rng));
        store.insert(format!("{p}.init.b"), uniform(&[h], rng));
    }
}

/// GRU field parameters bound on a tape.
pub struct GruVars {
    pub w_r: Var,
    pub w_z: Var,
    pub w_h: Var,
    pub u_r: Var,
    pub u_z: Var,
    pub u_h: Var,
    pub b_r: Var,
    pub b_z: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let g = |n: &str| bound.get(&format!("{prefix}.gru.{n}")).cloned();
        Ok(Self {
            w_r: g("w_r")?,
            w_z: g("w_z")?,
            w_h: g("w_h")?,
            u_r: g("u_r")?,
            u_z: g("u_z")?,
            u_h: g("u_h")?,
            b_r: g("b_r")?,
            b_z: g("b_z")?,
            b_h: g("b_h")?,
        })
    }
}

/// Continuous-time GRU field `dh/dt = (1 − z) ⊙ (h̃ − h)` driven by the control
/// derivative `xdot`.
pub fn gru_field(h: &Var, xdot: &Var, p: &GruVars) -> Result<Var> {
    let z = xdot.matmul(&p.w_z)?.add(&h.matmul(&p.u_z)?)?.add(&p.b_z)?.sigmoid()?;
    let r = xdot.matmul(&p.w_r)?.add(&h.matmul(&p.u_r)?)?.add(&p.b_r)?.sigmoid()?;
    let candidate = xdot
        .matmul(&p.w_h)?
        .add(&r.mul(h)?.matmul(&p.u_h)?)?
        .add(&p.b_h)?
        .tanh()?;
    z.one_minus()?.mul(&candidate.sub(h)?)
}

/// `h(0) = first_observation · W + b`.
pub fn init_hidden(first_observation: &Var, w: &Var, b: &Var) -> Result<Var> {
    first_observation.matmul(w)?.add(b)
}

/// Spline control paths for one window, fitted on knots evenly spaced in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct WindowPaths {
    pub flow: SplinePath,
    pub poi: SplinePath,
}

fn unit_knots(count: usize) -> Vec<f64> {
    (0..count).map(|j| j as f64 / (count - 1) as f64).collect()
}

impl WindowPaths {
    /// `flow_window`: `T×N×C`, `poi_window`: `M×N×K`.
    pub fn fit(flow_window: &Tensor, poi_window: &Tensor) -> Result<Self> {
        let (fs, ps) = (flow_window.shape(), poi_window.shape());
        if fs.len() != 3 || ps.len() != 3 || fs[1] != ps[1] {
            return Err(Error::Shape {
                op: "WindowPaths::fit",
                lhs: fs.to_vec(),
                rhs: ps.to_vec(),
            });
        }
        Ok(Self {
            flow: fit_natural_cubic(&unit_knots(fs[0]), flow_window.data(), fs[1] * fs[2])?,
            poi: fit_natural_cubic(&unit_knots(ps[0]), poi_window.data(), ps[1] * ps[2])?,
        })
    }
}

/// Control paths for a batch of windows.
#[derive(Clone, Copy)]
pub struct BatchPaths<'a> {
    pub windows: &'a [WindowPaths],
    pub n: usize,
    pub c: usize,
    pub k: usize,
}

impl<'a> BatchPaths<'a> {
    pub fn new(windows: &'a [WindowPaths], cfg: &EncoderConfig) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for w in windows {
            if w.flow.channels() != cfg.n * cfg.c || w.poi.channels() != cfg.n * cfg.k {
                return Err(Error::invalid(format!(
                    "window paths carry {}/{} channels, encoder expects {}/{}",
                    w.flow.channels(),
                    w.poi.channels(),
                    cfg.n * cfg.c,
                    cfg.n * cfg.k
                )));
            }
        }
        Ok(Self {
            windows,
            n: cfg.n,
            c: cfg.c,
            k: cfg.k,
        })
    }

    pub fn batch(&self) -> usize {
        self.windows.len()
    }

    fn gather(
        &self,
        path: PathKind,
        f: impl Fn(&SplinePath, &mut [f64]) -> Result<()>,
    ) -> Result<Tensor> {
        let (per, cols) = match path {
            PathKind::Flow => (self.n * self.c, self.c),
            PathKind::Poi => (self.n * self.k, 1),
        };
        let mut data = vec![0.0; self.batch() * per];
        for (w, chunk) in self.windows.iter().zip(data.chunks_mut(per)) {
            let s = match path {
                PathKind::Flow => &w.flow,
                PathKind::Poi => &w.poi,
            };
            f(s, chunk)?;
        }
        Ok(Tensor::raw(vec![self.batch() * per / cols, cols], data))
    }

    /// Control derivative at `t`: `(B·N)×C` for flow, `(B·N·K)×1` for POI.
    pub fn derivative(&self, path: PathKind, t: f64) -> Result<Tensor> {
        self.gather(path, |s, out| s.derivative_into(t, out))
    }

    /// Control value at `t = 0`.
    pub fn first(&self, path: PathKind) -> Result<Tensor> {
        self.gather(path, |s, out| s.eval_into(0.0, out))
    }
}

/// Source of the causal weights applied to the POI field.
#[derive(Clone, Copy)]
pub enum Correction<'a> {
    None,
    Estimator(&'a CausalEstimator),
    /// Replays a previously computed schedule.
    Fixed(&'a [Tensor]),
}

#[derive(Clone, Debug)]
pub struct EncoderState<S> {
    /// `(B·N)×H`
    pub h_x: S,
    /// `(B·N·K)×H`
    pub h_p: S,
    /// One `(B·N)×K` weight tensor per observation point (empty without correction).
    pub causal_schedule: Vec<Tensor>,
    /// Estimator outputs per observation point (empty unless an estimator ran).
    pub causal_steps: Vec<CausalStep>,
    pub obs_times_flow: Vec<f64>,
    pub obs_times_poi: Vec<f64>,
    pub nfe: usize,
}

struct SegmentFields<F, G, V> {
    flow: F,
    poi: G,
    value: V,
}

fn run_segments<S, F, G, V>(
    cfg: &EncoderConfig,
    batch: usize,
    correction: Correction<'_>,
    h_x0: S,
    h_p0: S,
    mut fields: SegmentFields<F, G, V>,
) -> Result<EncoderState<S>>
where
    S: OdeState,
    F: FnMut(&S, f64) -> Result<S>,
    G: FnMut(&S, f64, Option<&Tensor>) -> Result<S>,
    V: Fn(&S) -> Tensor,
{
    cfg.validate()?;
    if cfg.causal && matches!(correction, Correction::None) {
        return Err(Error::invalid("causal correction enabled but no estimator supplied"));
    }
    if let Correction::Fixed(s) = correction {
        if s.len() != cfg.l {
            return Err(Error::invalid(format!(
                "replayed schedule has {} entries, L={}",
                s.len(),
                cfg.l
            )));
        }
    }
    let mut h_x = h_x0;
    let mut h_p = h_p0;
    let mut schedule = Vec::new();
    let mut steps = Vec::new();
    let mut nfe = 0;
    for i in 0..cfg.l {
        let seg = (cfg.observation_time(i), cfg.observation_time(i + 1));
        let wrap = |e| Error::Segment {
            segment: i,
            source: Box::new(e),
        };
        let weights = if cfg.causal {
            let w = match correction {
                Correction::Estimator(est) => {
                    let st = est
                        .step((fields.value)(&h_x), (fields.value)(&h_p), batch, i as u64)
                        .map_err(wrap)?;
                    let w = st.weights.clone();
                    steps.push(st);
                    w
                }
                Correction::Fixed(s) => s[i].clone(),
                Correction::None => unreachable!("checked above"),
            };
            if w.shape() != [batch * cfg.n, cfg.k] {
                return Err(wrap(Error::Shape {
                    op: "causal weights",
                    lhs: w.shape().to_vec(),
                    rhs: vec![batch * cfg.n, cfg.k],
                }));
            }
            let scale = if cfg.rescale_weights { cfg.k as f64 } else { 1.0 };
            let column = Tensor::raw(
                vec![batch * cfg.n * cfg.k, 1],
                w.data().iter().map(|v| v * scale).collect(),
            );
            schedule.push(w);
            Some(column)
        } else {
            None
        };
        let tx = integrate(&mut fields.flow, &h_x, seg, &[], &cfg.flow_solver).map_err(wrap)?;
        let tp = integrate(
            |h: &S, t| (fields.poi)(h, t, weights.as_ref()),
            &h_p,
            seg,
            &[],
            &cfg.poi_solver,
        )
        .map_err(wrap)?;
        nfe += tx.nfe + tp.nfe;
        h_x = tx.into_last();
        h_p = tp.into_last();
    }
    Ok(EncoderState {
        h_x,
        h_p,
        causal_schedule: schedule,
        causal_steps: steps,
        obs_times_flow: (0..cfg.l).map(|i| cfg.observation_time(i) * cfg.t as f64).collect(),
        obs_times_poi: (0..cfg.l).map(|i| cfg.observation_time(i) * cfg.m as f64).collect(),
        nfe,
    })
}

/// Differentiable encode: every solver step is recorded on the tape of `bound`.
pub fn encode_tape(
    tape: &Tape,
    bound: &BoundParams,
    paths: BatchPaths<'_>,
    correction: Correction<'_>,
    cfg: &EncoderConfig,
) -> Result<EncoderState<Var>> {
    let gx = GruVars::from_bound(bound, "flow")?;
    let gp = GruVars::from_bound(bound, "poi")?;
    let h_x0 = init_hidden(
        &tape.constant(paths.first(PathKind::Flow)?),
        bound.get("flow.init.w")?,
        bound.get("flow.init.b")?,
    )?;
    let h_p0 = init_hidden(
        &tape.constant(paths.first(PathKind::Poi)?),
        bound.get("poi.init.w")?,
        bound.get("poi.init.b")?,
    )?;
    // weight columns are reused for every evaluation within a segment
    let mut cached: Option<(Tensor, Var)> = None;
    run_segments(
        cfg,
        paths.batch(),
        correction,
        h_x0,
        h_p0,
        SegmentFields {
            flow: |h: &Var, t| {
                let xd = tape.constant(paths.derivative(PathKind::Flow, t)?);
                gru_field(h, &xd, &gx)
            },
            poi: |h: &Var, t, w: Option<&Tensor>| {
                let pd = tape.constant(paths.derivative(PathKind::Poi, t)?);
                let f = gru_field(h, &pd, &gp)?;
                match w {
                    None => Ok(f),
                    Some(w) => {
                        let var = match &cached {
                            Some((t, v)) if t == w => v.clone(),
                            _ => {
                                let v = tape.constant(w.clone());
                                cached = Some((w.clone(), v.clone()));
                                v
                            }
                        };
                        f.mul(&var)
                    }
                }
            },
            value: Var::value,
        },
    )
}

/// Evaluates the GRU field on plain tensors through a throwaway tape.
fn gru_field_plain(params: &[Tensor; 9], h: &Tensor, xdot: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let g = gru_from_slice(&vars);
    gru_field(&tape.constant(h.clone()), &tape.constant(xdot.clone()), &g).map(|v| v.value())
}

fn gru_from_slice(v: &[Var]) -> GruVars {
    GruVars {
        w_r: v[0].clone(),
        w_z: v[1].clone(),
        w_h: v[2].clone(),
        u_r: v[3].clone(),
        u_z: v[4].clone(),
        u_h: v[5].clone(),
        b_r: v[6].clone(),
        b_z: v[7].clone(),
        b_h: v[8].clone(),
    }
}

fn gru_tensors(params: &ParamStore, prefix: &str) -> Result<[Tensor; 9]> {
    let get = |n: &str| params.get(&format!("{prefix}.gru.{n}")).cloned();
    Ok([
        get("w_r")?,
        get("w_z")?,
        get("w_h")?,
        get("u_r")?,
        get("u_z")?,
        get("u_h")?,
        get("b_r")?,
        get("b_z")?,
        get("b_h")?,
    ])
}

fn init_plain(params: &ParamStore, prefix: &str, first: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let w = tape.constant(params.get(&format!("{prefix}.init.w"))?.clone());
    let b = tape.constant(params.get(&format!("{prefix}.init.b"))?.clone());
    init_hidden(&tape.constant(first.clone()), &w, &b).map(|v| v.value())
}

/// Encode without gradient tracking. Memory stays proportional to the state size.
pub fn encode_plain(
    params: &ParamStore,
    paths: BatchPaths<'_>,
    correction: Correction<'_>,
    cfg: &EncoderConfig,
) -> Result<EncoderState<Tensor>> {
    let gx = gru_tensors(params, "flow")?;
    let gp = gru_tensors(params, "poi")?;
    let h_x0 = init_plain(params, "flow", &paths.first(PathKind::Flow)?)?;
    let h_p0 = init_plain(params, "poi", &paths.first(PathKind::Poi)?)?;
    run_segments(
        cfg,
        paths.batch(),
        correction,
        h_x0,
        h_p0,
        SegmentFields {
            flow: |h: &Tensor, t| gru_field_plain(&gx, h, &paths.derivative(PathKind::Flow, t)?),
            poi: |h: &Tensor, t, w: Option<&Tensor>| {
                let f = gru_field_plain(&gp, h, &paths.derivative(PathKind::Poi, t)?)?;
                match w {
                    None => Ok(f),
                    Some(w) => Ok(Tensor::raw(
                        f.shape().to_vec(),
                        f.data()
                            .chunks(f.shape()[1])
                            .zip(w.data())
                            .flat_map(|(row, &wv)| row.iter().map(move |v| v * wv))
                            .collect(),
                    )),
                }
            },
            value: Tensor::clone,
        },
    )
}

/// GRU field on one path for the adjoint pass; `weights` is the per-row
/// causal column of the current segment.
struct GruAdjoint<'a> {
    params: &'a [Tensor; 9],
    paths: BatchPaths<'a>,
    path: PathKind,
    weights: Option<Tensor>,
}

impl GruAdjoint<'_> {
    fn build(&self, tape: &Tape, h: &Var, t: f64, params: &[Var]) -> Result<Var> {
        let xd = tape.constant(self.paths.derivative(self.path, t)?);
        let f = gru_field(h, &xd, &gru_from_slice(params))?;
        match &self.weights {
            None => Ok(f),
            Some(w) => f.mul(&tape.constant(w.clone())),
        }
    }
}

impl AdjointField for GruAdjoint<'_> {
    fn eval(&self, h: &Tensor, t: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        self.build(&tape, &tape.constant(h.clone()), t, &vars).map(|v| v.value())
    }

    fn vjp(&self, h: &Tensor, t: f64, cotangent: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let hv = tape.param(h.clone());
        let f = self.build(&tape, &hv, t, &vars)?;
        f.mul(&tape.constant(cotangent.clone()))?.sum()?.backward()?;
        let dh = hv.grad().unwrap_or_else(|| Tensor::zeros(h.shape()));
        let mut dp = Vec::with_capacity(self.num_params());
        for v in &vars {
            match v.grad() {
                Some(g) => dp.extend_from_slice(g.data()),
                None => dp.extend(std::iter::repeat_n(0.0, v.with_value(Tensor::len))),
            }
        }
        Ok((dh, dp))
    }

    fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

/// Encoder parameter gradients by the adjoint method, given the terminal
/// states of a plain forward pass and the loss gradients with respect to them.
///
/// Segments are traversed backward with their recorded causal weights; only the
/// current augmented state is kept. Returns `(name, gradient)` pairs.
pub fn encoder_adjoint(
    params: &ParamStore,
    paths: BatchPaths<'_>,
    cfg: &EncoderConfig,
    state: &EncoderState<Tensor>,
    grad_h_x: &Tensor,
    grad_h_p: &Tensor,
) -> Result<Vec<(String, Tensor)>> {
    if cfg.causal && state.causal_schedule.len() != cfg.l {
        return Err(Error::invalid("encoder state lacks the causal schedule it was built with"));
    }
    let mut out = Vec::new();
    for (path, h_end, grad_end) in [
        (PathKind::Flow, &state.h_x, grad_h_x),
        (PathKind::Poi, &state.h_p, grad_h_p),
    ] {
        let prefix = path.prefix();
        let gru = gru_tensors(params, prefix)?;
        let solver = match path {
            PathKind::Flow => &cfg.flow_solver,
            PathKind::Poi => &cfg.poi_solver,
        };
        let mut h = h_end.clone();
        let mut a = grad_end.clone();
        let mut g = vec![0.0; gru.iter().map(Tensor::len).sum()];
        for i in (0..cfg.l).rev() {
            let weights = match path {
                PathKind::Poi if cfg.causal => {
                    let w = &state.causal_schedule[i];
                    let scale = if cfg.rescale_weights { cfg.k as f64 } else { 1.0 };
                    Some(Tensor::raw(
                        vec![w.len(), 1],
                        w.data().iter().map(|v| v * scale).collect(),
                    ))
                }
                _ => None,
            };
            let field = GruAdjoint {
                params: &gru,
                paths,
                path,
                weights,
            };
            let seg = (cfg.observation_time(i), cfg.observation_time(i + 1));
            let r = adjoint_backward(&field, &h, seg, &a, solver).map_err(|e| Error::Segment {
                segment: i,
                source: Box::new(e),
            })?;
            h = r.h_start;
            a = r.grad_h_start;
            for (acc, v) in g.iter_mut().zip(&r.grad_params) {
                *acc += v;
            }
        }
        let mut offset = 0;
        for (name, t) in GRU_NAMES.iter().zip(&gru) {
            let grad = Tensor::raw(t.shape().to_vec(), g[offset..offset + t.len()].to_vec());
            offset += t.len();
            out.push((format!("{prefix}.gru.{name}"), grad));
        }
        // h(0) = x0·W + b
        let tape = Tape::new();
        let w = tape.param(params.get(&format!("{prefix}.init.w"))?.clone());
        let b = tape.param(params.get(&format!("{prefix}.init.b"))?.clone());
        let h0 = init_hidden(&tape.constant(paths.first(path)?), &w, &b)?;
        h0.mul(&tape.constant(a))?.sum()?.backward()?;
        out.push((format!("{prefix}.init.w"), w.grad().expect("init weight on path")));
        out.push((format!("{prefix}.init.b"), b.grad().expect("init bias on path")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(tape: &Tape, cin: usize, h: usize) -> GruVars {
        let z = |s: &[usize]| tape.param(Tensor::zeros(s));
        GruVars {
            w_r: z(&[cin, h]),
            w_z: z(&[cin, h]),
            w_h: z(&[cin, h]),
            u_r: z(&[h, h]),
            u_z: z(&[h, h]),
            u_h: z(&[h, h]),
            b_r: z(&[h]),
            b_z: z(&[h]),
            b_h: z(&[h]),
        }
    }

    #[test]
    fn zero_parameters_give_half_decay() {
        let tape = Tape::new();
        let p = zero_gru(&tape, 2, 3);
        let h = tape.constant(Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let xd = tape.constant(Tensor::new(&[1, 2], vec![7.0, -3.0]).unwrap());
        let f = gru_field(&h, &xd, &p).unwrap().value();
        assert_eq!(f.data(), &[-0.5, 1.0, -0.25]);
    }

    #[test]
    fn saturated_update_gate_stops_the_field() {
        let tape = Tape::new();
        let mut p = zero_gru(&tape, 1, 2);
        p.b_z = tape.constant(Tensor::filled(&[2], 800.0));
        let h = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let xd = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let f = gru_field(&h, &xd, &p).unwrap().value();
        assert!(f.max_abs() < 1e-300);
    }

    #[test]
    fn zero_state_is_a_fixed_point_without_candidate_input() {
        let tape = Tape::new();
        let mut p = zero_gru(&tape, 1, 2);
        p.w_z = tape.constant(Tensor::filled(&[1, 2], 0.7));
        p.u_r = tape.constant(Tensor::filled(&[2, 2], -1.3));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let xd = tape.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
        assert_eq!(gru_field(&h, &xd, &p).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn field_shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let p = zero_gru(&tape, 2, 3);
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let xd = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(gru_field(&h, &xd, &p).is_err());
    }

    #[test]
    fn init_hidden_cases() {
        let tape = Tape::new();
        let x0 = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let zero = init_hidden(
            &x0,
            &tape.constant(Tensor::zeros(&[2, 2])),
            &tape.constant(Tensor::vector(vec![0.5, -0.5])),
        )
        .unwrap();
        assert_eq!(zero.value().data(), &[0.5, -0.5, 0.5, -0.5]);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ident = init_hidden(&x0, &tape.constant(eye), &tape.constant(Tensor::zeros(&[2]))).unwrap();
        assert_eq!(ident.value(), x0.value());
    }

    fn tiny_config(l: usize) -> EncoderConfig {
        EncoderConfig {
            n: 2,
            c: 1,
            k: 2,
            hidden: 3,
            t: 4,
            m: 3,
            l,
            flow_solver: SolverConfig::rk4(0.05),
            poi_solver: SolverConfig::rk4(0.05),
            causal: false,
            rescale_weights: false,
        }
    }

    fn tiny_paths(cfg: &EncoderConfig) -> Vec<WindowPaths> {
        let flow = Tensor::from_fn(&[cfg.t, cfg.n, cfg.c], |i| (i as f64 * 0.7).sin());
        let poi = Tensor::from_fn(&[cfg.m, cfg.n, cfg.k], |i| (i as f64 * 0.3).cos());
        vec![WindowPaths::fit(&flow, &poi).unwrap()]
    }

    fn params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_encoder_params(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn zero_gru_decays_both_paths() {
        let cfg = tiny_config(3);
        let mut p = params(&cfg, 1);
        for path in ["flow", "poi"] {
            for n in GRU_NAMES {
                let name = format!("{path}.gru.{n}");
                let shape = p.get(&name).unwrap().shape().to_vec();
                p.insert(name, Tensor::zeros(&shape));
            }
        }
        let w = tiny_paths(&cfg);
        let paths = BatchPaths::new(&w, &cfg).unwrap();
        let st = encode_plain(&p, paths, Correction::None, &cfg).unwrap();
        let decay = (-0.5f64).exp();
        let h0x = init_plain(&p, "flow", &paths.first(PathKind::Flow).unwrap()).unwrap();
        for (a, b) in st.h_x.data().iter().zip(h0x.data()) {
            assert!((a - b * decay).abs() < 1e-4);
        }
        let h0p = init_plain(&p, "poi", &paths.first(PathKind::Poi).unwrap()).unwrap();
        for (a, b) in st.h_p.data().iter().zip(h0p.data()) {
            assert!((a - b * decay).abs() < 1e-4);
        }
    }

    #[test]
    fn lockstep_observation_times() {
        let cfg = tiny_config(5);
        let w = tiny_paths(&cfg);
        let st = encode_plain(&params(&cfg, 2), BatchPaths::new(&w, &cfg).unwrap(), Correction::None, &cfg)
            .unwrap();
        assert_eq!(st.obs_times_flow.len(), 5);
        for (f, p) in st.obs_times_flow.iter().zip(&st.obs_times_poi) {
            assert!((f / cfg.t as f64 - p / cfg.m as f64).abs() <= 1e-12);
        }
        assert_eq!(st.obs_times_flow[1], 4.0 / 5.0);
    }

    #[test]
    fn tape_and_plain_encoders_agree() {
        let mut cfg = tiny_config(2);
        cfg.causal = true;
        let w = tiny_paths(&cfg);
        let paths = BatchPaths::new(&w, &cfg).unwrap();
        let p = params(&cfg, 3);
        let sched = vec![
            Tensor::new(&[2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap(),
            Tensor::new(&[2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap(),
        ];
        let plain = encode_plain(&p, paths, Correction::Fixed(&sched), &cfg).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let taped = encode_tape(&tape, &bound, paths, Correction::Fixed(&sched), &cfg).unwrap();
        assert_eq!(plain.h_x, taped.h_x.value());
        assert_eq!(plain.h_p, taped.h_p.value());
    }

    #[test]
    fn uniform_weights_equal_scaled_field() {
        let mut cfg = tiny_config(2);
        cfg.causal = true;
        let w = tiny_paths(&cfg);
        let paths = BatchPaths::new(&w, &cfg).unwrap();
        let p = params(&cfg, 4);
        let uniform = vec![Tensor::filled(&[2, 2], 0.5); 2];
        let corrected = encode_plain(&p, paths, Correction::Fixed(&uniform), &cfg).unwrap();
        // direct integration of (1/K)·f
        let gp = gru_tensors(&p, "poi").unwrap();
        let h0 = init_plain(&p, "poi", &paths.first(PathKind::Poi).unwrap()).unwrap();
        let mut h = h0;
        for i in 0..2 {
            let seg = (cfg.observation_time(i), cfg.observation_time(i + 1));
            h = integrate(
                |h: &Tensor, t| {
                    Ok(gru_field_plain(&gp, h, &paths.derivative(PathKind::Poi, t)?)?.map(|v| v * 0.5))
                },
                &h,
                seg,
                &[],
                &cfg.poi_solver,
            )
            .unwrap()
            .into_last();
        }
        assert_eq!(corrected.h_p, h);
    }

    #[test]
    fn missing_estimator_is_an_error() {
        let mut cfg = tiny_config(2);
        cfg.causal = true;
        let w = tiny_paths(&cfg);
        let err = encode_plain(&params(&cfg, 5), BatchPaths::new(&w, &cfg).unwrap(), Correction::None, &cfg)
            .unwrap_err();
        assert!(err.to_string().contains("estimator"), "{err}");
    }

    #[test]
    fn adjoint_matches_tape_gradients() {
        let mut cfg = tiny_config(2);
        cfg.causal = true;
        cfg.flow_solver = SolverConfig::rk4(0.05);
        let w = tiny_paths(&cfg);
        let paths = BatchPaths::new(&w, &cfg).unwrap();
        let p = params(&cfg, 6);
        let sched = vec![
            Tensor::new(&[2, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap(),
            Tensor::new(&[2, 2], vec![0.5, 0.5, 0.2, 0.8]).unwrap(),
        ];
        // loss = sum(h_x ⊙ cx) + sum(h_p ⊙ cp)
        let cx = Tensor::from_fn(&[2, 3], |i| 0.3 + i as f64 * 0.1);
        let cp = Tensor::from_fn(&[4, 3], |i| 0.5 - i as f64 * 0.07);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let st = encode_tape(&tape, &bound, paths, Correction::Fixed(&sched), &cfg).unwrap();
        let loss = st
            .h_x
            .mul(&tape.constant(cx.clone()))
            .unwrap()
            .sum()
            .unwrap()
            .add(&st.h_p.mul(&tape.constant(cp.clone())).unwrap().sum().unwrap())
            .unwrap();
        loss.backward().unwrap();
        let tape_grads = bound.grads();

        let plain = encode_plain(&p, paths, Correction::Fixed(&sched), &cfg).unwrap();
        let adj = encoder_adjoint(&p, paths, &cfg, &plain, &cx, &cp).unwrap();
        for (name, g) in adj {
            let i = p.names().iter().position(|n| *n == name).unwrap();
            for (a, b) in g.data().iter().zip(tape_grads[i].data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                assert!(rel < 1e-3, "{name}: {a} vs {b}");
            }
        }
    }
}
