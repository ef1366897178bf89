//! Adjoint sensitivity gradients.
//!
//! The augmented state `[h, a, g]` is integrated backward from the terminal
//! time: `h` retraces the forward solution, `a = dL/dh` obeys
//! `da/dt = -aᵀ ∂f/∂h`, and `g` accumulates `∫ aᵀ ∂f/∂θ dt`. Only the current
//! augmented state is held in memory, independent of the number of steps.

use super::{integrate, SolverConfig};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// A differentiable vector field with flattened parameters θ.
pub trait AdjointField {
    fn eval(&self, h: &Tensor, t: f64) -> Result<Tensor>;

    /// Vector-Jacobian products `(aᵀ ∂f/∂h, aᵀ ∂f/∂θ)` at `(h, t)`.
    fn vjp(&self, h: &Tensor, t: f64, cotangent: &Tensor) -> Result<(Tensor, Vec<f64>)>;

    fn num_params(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    /// State reconstructed at the start of the span.
    pub h_start: Tensor,
    /// dL/dh at the start of the span.
    pub grad_h_start: Tensor,
    /// dL/dθ contributed by this span, flattened.
    pub grad_params: Vec<f64>,
    pub nfe: usize,
}

/// Back-propagates `grad_end = dL/dh(t1)` over `span = (t0, t1)`, starting from
/// the terminal state `h_end` produced by a forward integration of `field`.
pub fn adjoint_backward<F: AdjointField>(
    field: &F,
    h_end: &Tensor,
    span: (f64, f64),
    grad_end: &Tensor,
    config: &SolverConfig,
) -> Result<AdjointResult> {
    let (t0, t1) = span;
    if h_end.shape() != grad_end.shape() {
        return Err(Error::Shape {
            op: "adjoint_backward",
            lhs: h_end.shape().to_vec(),
            rhs: grad_end.shape().to_vec(),
        });
    }
    let probe = field.eval(h_end, t1)?;
    if probe.shape() != h_end.shape() {
        return Err(Error::Shape {
            op: "adjoint_backward (field output vs trajectory state)",
            lhs: probe.shape().to_vec(),
            rhs: h_end.shape().to_vec(),
        });
    }
    let n = h_end.len();
    let p = field.num_params();
    let state_shape = h_end.shape().to_vec();

    let mut aug = Vec::with_capacity(2 * n + p);
    aug.extend_from_slice(h_end.data());
    aug.extend_from_slice(grad_end.data());
    aug.resize(2 * n + p, 0.0);
    let aug0 = Tensor::vector(aug);

    let augmented = |s: &Tensor, tau: f64| -> Result<Tensor> {
        let t = t1 - tau;
        let h = Tensor::raw(state_shape.clone(), s.data()[..n].to_vec());
        let a = Tensor::raw(state_shape.clone(), s.data()[n..2 * n].to_vec());
        let f = field.eval(&h, t)?;
        let (a_dot, g_dot) = field.vjp(&h, t, &a)?;
        if g_dot.len() != p {
            return Err(Error::invalid(format!(
                "field reported {p} parameters but its vjp returned {}",
                g_dot.len()
            )));
        }
        let mut out = Vec::with_capacity(2 * n + p);
        out.extend(f.data().iter().map(|v| -v));
        out.extend_from_slice(a_dot.data());
        out.extend_from_slice(&g_dot);
        Ok(Tensor::vector(out))
    };

    let traj = integrate(augmented, &aug0, (0.0, t1 - t0), &[], config)?;
    let nfe = traj.nfe;
    let fin = traj.into_last().into_data();
    Ok(AdjointResult {
        h_start: Tensor::raw(state_shape.clone(), fin[..n].to_vec()),
        grad_h_start: Tensor::raw(state_shape, fin[n..2 * n].to_vec()),
        grad_params: fin[2 * n..].to_vec(),
        nfe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(h) = a·h
    struct Linear(f64);

    impl AdjointField for Linear {
        fn eval(&self, h: &Tensor, _t: f64) -> Result<Tensor> {
            Ok(h.map(|v| self.0 * v))
        }
        fn vjp(&self, h: &Tensor, _t: f64, a: &Tensor) -> Result<(Tensor, Vec<f64>)> {
            let dh = a.map(|v| self.0 * v);
            let da: f64 = a.data().iter().zip(h.data()).map(|(x, y)| x * y).sum();
            Ok((dh, vec![da]))
        }
        fn num_params(&self) -> usize {
            1
        }
    }

    /// f ≡ 0
    struct Still;

    impl AdjointField for Still {
        fn eval(&self, h: &Tensor, _t: f64) -> Result<Tensor> {
            Ok(Tensor::zeros(h.shape()))
        }
        fn vjp(&self, h: &Tensor, _t: f64, _a: &Tensor) -> Result<(Tensor, Vec<f64>)> {
            Ok((Tensor::zeros(h.shape()), vec![]))
        }
        fn num_params(&self) -> usize {
            0
        }
    }

    #[test]
    fn identity_flow_passes_gradient_through() {
        let g = Tensor::vector(vec![0.3, -1.2]);
        let r = adjoint_backward(&Still, &Tensor::vector(vec![1.0, 2.0]), (0.0, 1.0), &g, &SolverConfig::rk4(0.1))
            .unwrap();
        assert_eq!(r.grad_h_start, g);
    }

    #[test]
    fn linear_field_parameter_gradient() {
        let a = 0.3;
        let cfg = SolverConfig::rk4(0.01);
        let h_end = integrate(
            |h: &Tensor, t| Linear(a).eval(h, t),
            &Tensor::scalar(1.0),
            (0.0, 1.0),
            &[],
            &cfg,
        )
        .unwrap()
        .into_last();
        let r = adjoint_backward(&Linear(a), &h_end, (0.0, 1.0), &Tensor::scalar(1.0), &cfg).unwrap();
        // h(1) = h0·e^a ⇒ ∂h(1)/∂a = h0·e^a, ∂h(1)/∂h0 = e^a
        assert!((r.grad_params[0] - 1.349859).abs() < 1e-6);
        assert!((r.grad_h_start.data()[0] - a.exp()).abs() < 1e-9);
        assert!((r.h_start.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let err = adjoint_backward(
            &Still,
            &Tensor::vector(vec![1.0, 2.0]),
            (0.0, 1.0),
            &Tensor::scalar(1.0),
            &SolverConfig::rk4(0.1),
        );
        assert!(err.is_err());
    }
}
