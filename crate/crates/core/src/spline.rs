//! Natural cubic spline control paths.
//!
//! Each channel is fitted independently. On interval `i` the path is
//! `a + b·u + c·u² + d·u³` with `u = t - t_i`, and the second derivative
//! vanishes at both end knots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplinePath {
    knots: Vec<f64>,
    channels: usize,
    /// `coeffs[interval * channels + channel] = [a, b, c, d]`
    coeffs: Vec<[f64; 4]>,
}

/// Fits a natural cubic spline through `observations`, given row-major as
/// `knots × channels`.
pub fn fit_natural_cubic(times: &[f64], observations: &[f64], channels: usize) -> Result<SplinePath> {
    let n = times.len();
    if n < 2 {
        return Err(Error::Spline(format!("need at least 2 knots, got {n}")));
    }
    if channels == 0 || observations.len() != n * channels {
        return Err(Error::Spline(format!(
            "{} observations do not form {n} knots × {channels} channels",
            observations.len()
        )));
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Spline(format!(
            "knot times must be strictly increasing: t[{i}]={} then t[{}]={}",
            times[i],
            i + 1,
            times[i + 1]
        )));
    }
    if times.iter().chain(observations).any(|v| !v.is_finite()) {
        return Err(Error::Spline("non-finite knot time or observation".into()));
    }

    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut coeffs = vec![[0.0; 4]; (n - 1) * channels];
    let mut y = vec![0.0; n];
    for ch in 0..channels {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = observations[j * channels + ch];
        }
        let m = second_derivatives(&h, &y);
        for i in 0..n - 1 {
            let hi = h[i];
            coeffs[i * channels + ch] = [
                y[i],
                (y[i + 1] - y[i]) / hi - hi * (2.0 * m[i] + m[i + 1]) / 6.0,
                m[i] / 2.0,
                (m[i + 1] - m[i]) / (6.0 * hi),
            ];
        }
    }
    Ok(SplinePath {
        knots: times.to_vec(),
        channels,
        coeffs,
    })
}

/// Knot second derivatives with natural end conditions, via the Thomas algorithm.
fn second_derivatives(h: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let interior = n - 2;
    // row r ↔ knot r+1: h[r]·M_r + 2(h[r]+h[r+1])·M_{r+1} + h[r+1]·M_{r+2} = rhs
    let mut diag = vec![0.0; interior];
    let mut rhs = vec![0.0; interior];
    for r in 0..interior {
        diag[r] = 2.0 * (h[r] + h[r + 1]);
        rhs[r] = 6.0 * ((y[r + 2] - y[r + 1]) / h[r + 1] - (y[r + 1] - y[r]) / h[r]);
    }
    for r in 1..interior {
        let w = h[r] / diag[r - 1];
        diag[r] -= w * h[r];
        rhs[r] -= w * rhs[r - 1];
    }
    m[interior] = rhs[interior - 1] / diag[interior - 1];
    for r in (0..interior - 1).rev() {
        m[r + 1] = (rhs[r] - h[r + 1] * m[r + 2]) / diag[r];
    }
    m
}

impl SplinePath {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn intervals(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn span(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    pub fn coefficients(&self, interval: usize, channel: usize) -> [f64; 4] {
        self.coeffs[interval * self.channels + channel]
    }

    /// Interval index and local offset for `t`, rejecting points outside the span.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.span();
        // tolerate rounding in solver time arithmetic
        let slack = 1e-12 * (hi - lo).max(1.0);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::Spline(format!(
                "t={t} outside the fitted span [{lo}, {hi}]"
            )));
        }
        let t = t.clamp(lo, hi);
        let i = match self.knots.partition_point(|&k| k <= t) {
            0 => 0,
            p => (p - 1).min(self.intervals() - 1),
        };
        Ok((i, t - self.knots[i]))
    }

    fn eval_with(&self, t: f64, out: &mut [f64], f: impl Fn(&[f64; 4], f64) -> f64) -> Result<()> {
        if out.len() != self.channels {
            return Err(Error::Spline(format!(
                "output buffer of {} for {} channels",
                out.len(),
                self.channels
            )));
        }
        let (i, u) = self.locate(t)?;
        let row = &self.coeffs[i * self.channels..(i + 1) * self.channels];
        for (o, c) in out.iter_mut().zip(row) {
            *o = f(c, u);
        }
        Ok(())
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.eval_with(t, out, |c, u| c[0] + u * (c[1] + u * (c[2] + u * c[3])))
    }

    pub fn derivative_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.eval_with(t, out, |c, u| c[1] + u * (2.0 * c[2] + 3.0 * u * c[3]))
    }

    pub fn second_derivative_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.eval_with(t, out, |c, u| 2.0 * c[2] + 6.0 * u * c[3])
    }

    /// Path value at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// Time derivative of the path at `t`.
    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.derivative_into(t, &mut out)?;
        Ok(out)
    }

    pub fn second_derivative(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.second_derivative_into(t, &mut out)?;
        Ok(out)
    }
}
