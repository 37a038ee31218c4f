//! Central-difference gradient verification.

use crate::error::{AutodiffError, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest absolute coordinate difference.
    pub max_abs_err: f64,
    /// `max_abs_err` divided by the larger of the two gradients' max-norms.
    pub rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Checks the gradient of the scalar produced by `f` with respect to its
/// input at `x`, perturbing every coordinate by `+-eps`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let loss = f(&mut tape, input)?;
    tape.backward(loss)?;
    let analytic = tape
        .take_grad(input)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let value = |probe: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(probe.clone());
        let loss = f(&mut tape, input)?;
        Ok(tape.value(loss).data()[0].as_f64())
    };
    compare_gradients(value, &analytic, x, eps, None)
}

/// Compares `analytic` with central differences of `value` at `x`.
///
/// `coords` restricts the comparison to a subset of flat indices; `None`
/// checks every coordinate.
pub fn compare_gradients<T, F>(
    value: F,
    analytic: &Tensor<T>,
    x: &Tensor<T>,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "compare_gradients",
            lhs: analytic.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let (mut max_abs, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::lit(orig.as_f64() + eps);
        let plus = value(&probe)?;
        probe.data_mut()[i] = T::lit(orig.as_f64() - eps);
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i].as_f64();
        max_abs = max_abs.max((a - numeric).abs());
        max_a = max_a.max(a.abs());
        max_n = max_n.max(numeric.abs());
    }
    let scale = max_a.max(max_n);
    let rel_err = if scale > 0.0 { max_abs / scale } else { 0.0 };
    Ok(GradCheckReport {
        max_abs_err: max_abs,
        rel_err,
        checked: coords.len(),
    })
}
