//! Fixed-step and adaptive integration of `dh/dt = f(h, t)`, with states
//! reported at requested observation times, plus adjoint-mode gradients.

mod adjoint;
mod state;

use serde::{Deserialize, Serialize};

pub use adjoint::{adjoint_backward, AdjointField, AdjointResult};
pub use state::OdeState;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
    AdaptiveRk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GradientMode {
    BackpropThroughSolver,
    Adjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Step for the fixed-step methods.
    pub step_size: f64,
    pub rtol: f64,
    pub atol: f64,
    pub min_step: f64,
    pub max_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::AdaptiveRk4,
            step_size: 0.1,
            rtol: 1e-3,
            atol: 1e-5,
            min_step: 1e-8,
            max_step: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn rk4(step_size: f64) -> Self {
        Self {
            method: Method::Rk4,
            step_size,
            ..Default::default()
        }
    }

    pub fn euler(step_size: f64) -> Self {
        Self {
            method: Method::Euler,
            step_size,
            ..Default::default()
        }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::AdaptiveRk4,
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fixed_ok = self.method == Method::AdaptiveRk4 || self.step_size > 0.0;
        let adaptive_ok = self.rtol > 0.0
            && self.atol > 0.0
            && self.min_step > 0.0
            && self.min_step <= self.max_step;
        if fixed_ok && adaptive_ok && self.step_size.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid solver configuration {self:?}")))
        }
    }
}

/// States at the requested observation times.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    /// Number of vector-field evaluations.
    pub nfe: usize,
}

impl<S> Trajectory<S> {
    pub fn last(&self) -> &S {
        self.states.last().expect("trajectory holds at least the terminal state")
    }

    pub fn into_last(mut self) -> S {
        self.states.pop().expect("trajectory holds at least the terminal state")
    }
}

fn check_span(span: (f64, f64), obs_times: &[f64]) -> Result<Vec<f64>> {
    let (t0, t1) = span;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::invalid(format!("integration span [{t0}, {t1}] is empty")));
    }
    if obs_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("observation times must be sorted"));
    }
    if let Some(t) = obs_times.iter().find(|&&t| t < t0 || t > t1) {
        return Err(Error::invalid(format!(
            "observation time {t} outside span [{t0}, {t1}]"
        )));
    }
    let mut times: Vec<f64> = obs_times.to_vec();
    times.dedup();
    if times.last() != Some(&t1) {
        times.push(t1);
    }
    Ok(times)
}

fn eval_field<S: OdeState>(
    field: &mut impl FnMut(&S, f64) -> Result<S>,
    h: &S,
    t: f64,
    nfe: &mut usize,
) -> Result<S> {
    *nfe += 1;
    let out = field(h, t).map_err(|e| match e {
        Error::Solver { .. } => e,
        other => Error::Solver {
            t,
            reason: other.to_string(),
        },
    })?;
    if !out.all_finite() {
        return Err(Error::Solver {
            t,
            reason: "vector field returned a non-finite value".into(),
        });
    }
    Ok(out)
}

fn rk4_step<S: OdeState>(
    field: &mut impl FnMut(&S, f64) -> Result<S>,
    h: &S,
    t: f64,
    dt: f64,
    k1: Option<S>,
    nfe: &mut usize,
) -> Result<S> {
    let k1 = match k1 {
        Some(k) => k,
        None => eval_field(field, h, t, nfe)?,
    };
    let y2 = S::lin_comb(&[(1.0, h), (0.5 * dt, &k1)])?;
    let k2 = eval_field(field, &y2, t + 0.5 * dt, nfe)?;
    let y3 = S::lin_comb(&[(1.0, h), (0.5 * dt, &k2)])?;
    let k3 = eval_field(field, &y3, t + 0.5 * dt, nfe)?;
    let y4 = S::lin_comb(&[(1.0, h), (dt, &k3)])?;
    let k4 = eval_field(field, &y4, t + dt, nfe)?;
    S::lin_comb(&[
        (1.0, h),
        (dt / 6.0, &k1),
        (dt / 3.0, &k2),
        (dt / 3.0, &k3),
        (dt / 6.0, &k4),
    ])
}

/// Integrates `field` from `h0` over `span`, returning the state at every
/// observation time (and always at the terminal time).
///
/// Fixed-step methods restart at each observation time and shorten the last
/// sub-step of each segment so they land on it exactly.
pub fn integrate<S: OdeState>(
    mut field: impl FnMut(&S, f64) -> Result<S>,
    h0: &S,
    span: (f64, f64),
    obs_times: &[f64],
    config: &SolverConfig,
) -> Result<Trajectory<S>> {
    config.validate()?;
    if config.method == Method::AdaptiveRk4 {
        return integrate_adaptive(field, h0, span, obs_times, config);
    }
    if !h0.all_finite() {
        return Err(Error::invalid("initial state is not finite"));
    }
    let targets = check_span(span, obs_times)?;
    let mut nfe = 0;
    let mut t = span.0;
    let mut h = h0.clone();
    let mut states = Vec::with_capacity(targets.len());
    for &target in &targets {
        let length = target - t;
        if length > 0.0 {
            let steps = ((length / config.step_size) - 1e-9).ceil().max(1.0) as usize;
            for j in 0..steps {
                let ts = t + j as f64 * config.step_size;
                let te = if j + 1 == steps {
                    target
                } else {
                    t + (j + 1) as f64 * config.step_size
                };
                let dt = te - ts;
                h = match config.method {
                    Method::Euler => {
                        let k = eval_field(&mut field, &h, ts, &mut nfe)?;
                        S::lin_comb(&[(1.0, &h), (dt, &k)])?
                    }
                    _ => rk4_step(&mut field, &h, ts, dt, None, &mut nfe)?,
                };
            }
        }
        t = target;
        states.push(h.clone());
    }
    Ok(Trajectory {
        times: targets,
        states,
        nfe,
    })
}

/// Step-doubling RK4: every trial step is taken once at `dt` and twice at
/// `dt/2`; `|difference|/15` estimates the local error of the half-step result.
/// A step is accepted when the estimate is within `atol + rtol·|h|` element-wise,
/// and the Richardson-extrapolated value `(16·half - full)/15` is kept.
pub fn integrate_adaptive<S: OdeState>(
    mut field: impl FnMut(&S, f64) -> Result<S>,
    h0: &S,
    span: (f64, f64),
    obs_times: &[f64],
    config: &SolverConfig,
) -> Result<Trajectory<S>> {
    config.validate()?;
    if !h0.all_finite() {
        return Err(Error::invalid("initial state is not finite"));
    }
    let targets = check_span(span, obs_times)?;
    let mut nfe = 0;
    let mut t = span.0;
    let mut h = h0.clone();
    let mut dt = config.max_step;
    let mut states = Vec::with_capacity(targets.len());
    for &target in &targets {
        while target - t > 1e-14 * target.abs().max(1.0) {
            let remaining = target - t;
            let trial = dt.min(remaining);
            let landing = trial >= remaining;
            let k1 = eval_field(&mut field, &h, t, &mut nfe)?;
            let full = rk4_step(&mut field, &h, t, trial, Some(k1.clone()), &mut nfe)?;
            let mid = rk4_step(&mut field, &h, t, 0.5 * trial, Some(k1), &mut nfe)?;
            let half = rk4_step(&mut field, &mid, t + 0.5 * trial, 0.5 * trial, None, &mut nfe)?;
            let err = S::scaled_error(&full, &half, config.atol, config.rtol)?;
            let factor = if err == 0.0 {
                f64::INFINITY
            } else {
                0.9 * (1.0 / err).powf(0.2)
            };
            let proposal = (trial * factor).clamp(config.min_step, config.max_step);
            if err <= 1.0 {
                t = if landing { target } else { t + trial };
                h = S::lin_comb(&[(16.0 / 15.0, &half), (-1.0 / 15.0, &full)])?;
                // a step shortened to land on a target says nothing about growth
                dt = if landing { proposal.max(dt) } else { proposal };
            } else {
                if trial <= config.min_step {
                    return Err(Error::Solver {
                        t,
                        reason: format!(
                            "step size underflow: error estimate {err:.3e} at min_step {}",
                            config.min_step
                        ),
                    });
                }
                dt = proposal.min(0.5 * trial).max(config.min_step);
            }
        }
        t = target;
        states.push(h.clone());
    }
    Ok(Trajectory {
        times: targets,
        states,
        nfe,
    })
}
