//! Finite-difference verification of the tape's analytic gradients.
//!
//! The harness treats a computation as a scalar function of one tensor and
//! compares the tape's reverse-mode gradient against central differences in
//! 64-bit precision. Per-coordinate disagreement is measured as
//! `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`, so both tiny
//! and large gradients are judged on the same relative scale.

use crate::error::Result;
use crate::nn::{Tape, Tensor, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Central-difference derivative of `f` at `x` along the given flat
/// coordinates. `f` is invoked twice per coordinate on a perturbed copy.
pub fn numeric_gradient_at(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    indices: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let mut grads = Vec::with_capacity(indices.len());
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grads.push((plus - minus) / (2.0 * step));
    }
    Ok(grads)
}

/// Result of a full gradient check: the worst coordinate and its error.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Check the tape gradient of `build` with respect to the leaf `x`.
///
/// `build` receives a fresh tape and the leaf var and must return a scalar
/// var; it runs once for the analytic gradient and `2·numel` times for the
/// finite differences. Returns the maximum relative error over all
/// coordinates of `x`.
pub fn check_input_gradient(
    mut build: impl FnMut(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    step: f64,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).to_vec();

    let indices: Vec<usize> = (0..x.numel()).collect();
    let numeric = numeric_gradient_at(
        |probe| {
            let mut t = Tape::new();
            let v = t.leaf(probe.clone());
            let l = build(&mut t, v)?;
            t.value(l).item()
        },
        x,
        &indices,
        step,
    )?;

    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.max_rel_err {
            worst = GradCheck {
                max_rel_err: e,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}
