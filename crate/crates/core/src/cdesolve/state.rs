use crate::error::{Error, Result};
use crate::numcore::{Tensor, Var};

/// Arithmetic a solver needs from its state type.
///
/// Implemented for plain [`Tensor`]s (no gradient tracking) and for tape
/// [`Var`]s, which makes every solver step differentiable.
pub trait OdeState: Clone {
    fn lin_comb(terms: &[(f64, &Self)]) -> Result<Self>;

    /// `max_i |full_i - half_i| / 15 / (atol + rtol·|half_i|)`.
    fn scaled_error(full: &Self, half: &Self, atol: f64, rtol: f64) -> Result<f64>;

    fn all_finite(&self) -> bool;
}

fn scaled_error_of(full: &Tensor, half: &Tensor, atol: f64, rtol: f64) -> Result<f64> {
    if full.shape() != half.shape() {
        return Err(Error::Shape {
            op: "scaled_error",
            lhs: full.shape().to_vec(),
            rhs: half.shape().to_vec(),
        });
    }
    Ok(full
        .data()
        .iter()
        .zip(half.data())
        .map(|(f, h)| (f - h).abs() / 15.0 / (atol + rtol * h.abs()))
        .fold(0.0, f64::max))
}

impl OdeState for Tensor {
    fn lin_comb(terms: &[(f64, &Self)]) -> Result<Self> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::invalid("lin_comb of zero terms"))?;
        let mut acc = vec![0.0; first.len()];
        for (c, t) in terms {
            if t.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "lin_comb",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += c * x;
            }
        }
        Ok(Tensor::raw(first.shape().to_vec(), acc))
    }

    fn scaled_error(full: &Self, half: &Self, atol: f64, rtol: f64) -> Result<f64> {
        scaled_error_of(full, half, atol, rtol)
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl OdeState for Var {
    fn lin_comb(terms: &[(f64, &Self)]) -> Result<Self> {
        Var::lin_comb(terms)
    }

    fn scaled_error(full: &Self, half: &Self, atol: f64, rtol: f64) -> Result<f64> {
        full.with_value(|f| half.with_value(|h| scaled_error_of(f, h, atol, rtol)))
    }

    fn all_finite(&self) -> bool {
        self.with_value(Tensor::is_finite)
    }
}
