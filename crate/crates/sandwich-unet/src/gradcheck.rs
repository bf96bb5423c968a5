//! Finite-difference verification of analytic gradients.
//!
//! Central differences `(f(x+h) - f(x-h)) / 2h` are compared per element
//! against the gradient produced by the tape. Elements sitting on a kink
//! (one-sided derivatives disagree) are flagged and excluded from the
//! reported maximum, since no finite-difference estimate is meaningful
//! there.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Outcome of a gradient check over the selected elements.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst error among non-kink elements: relative when the larger of
    /// |analytic| and |numeric| is at least 1e-6, absolute below that.
    pub max_error: f64,
    /// Indices whose one-sided derivatives disagree (non-differentiable
    /// points); excluded from `max_error`.
    pub kinks: Vec<usize>,
    pub checked: usize,
}

/// Checks the gradient of scalar-valued `f` with respect to `x` at every
/// element of `x`.
pub fn check_gradients(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, h: f64) -> Result<GradCheck> {
    let all: Vec<usize> = (0..x.numel()).collect();
    check_gradients_at(f, x, h, &all)
}

/// Same as [`check_gradients`] but restricted to `indices` — the only
/// affordable option for large parameter tensors.
pub fn check_gradients_at(
    f: impl Fn(&Tensor) -> Tensor,
    x: &Tensor,
    h: f64,
    indices: &[usize],
) -> Result<GradCheck> {
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step h must be positive"));
    }
    if !x.requires_grad() {
        return Err(Error::invalid("gradient check target must be trainable"));
    }

    x.clear_grad();
    let (out, tape) = Tape::record(|| f(x));
    if out.numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient check function must be scalar-valued, got shape {:?}",
            out.shape()
        )));
    }
    let f0 = out.value();
    tape.backward(&out)?;
    let analytic = x
        .grad()
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut max_error = 0.0f64;
    let mut kinks = Vec::new();
    for &i in indices {
        let orig = x.data()[i];

        x.set_element(i, orig + h);
        let fp = f(x).value();
        x.set_element(i, orig - h);
        let fm = f(x).value();
        x.set_element(i, orig);

        let central = (fp - fm) / (2.0 * h);
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        // A genuine kink makes the one-sided slopes differ by O(1),
        // smooth curvature only by O(h).
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1.0) {
            kinks.push(i);
            continue;
        }

        let a = analytic[i];
        let denom = a.abs().max(central.abs());
        let err = if denom < 1e-6 {
            (a - central).abs()
        } else {
            (a - central).abs() / denom
        };
        max_error = max_error.max(err);
    }

    Ok(GradCheck {
        max_error,
        kinks,
        checked: indices.len(),
    })
}
