//! Finite-difference verification of analytic gradients.
//!
//! `grad_check` evaluates a scalar-valued function twice per input coordinate
//! (central differences) and compares against the tape's gradient. The
//! relative error uses a small floor so near-zero gradients are compared
//! absolutely instead of dividing by noise.

use super::{Tape, Tensor};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default acceptance threshold on the relative error.
pub const FD_TOL: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} at index {} (analytic {:.6e}, numeric {:.6e}, tol {:.1e})",
            if self.pass() { "ok" } else { "MISMATCH" },
            self.max_rel_err,
            self.worst_index,
            self.analytic.get(self.worst_index).copied().unwrap_or(f64::NAN),
            self.numeric.get(self.worst_index).copied().unwrap_or(f64::NAN),
            self.tol,
        )
    }
}

/// Checks the gradient of `f` (a scalar-valued function of one tensor) at
/// `x0` against central finite differences.
///
/// `f` is called with an attached leaf for the analytic pass and with plain
/// constants for the difference quotients, so it must treat both uniformly —
/// every built-in op does.
pub fn grad_check(
    f: &dyn Fn(&Tensor) -> Tensor,
    shape: &[usize],
    x0: &[f64],
    step: f64,
    tol: f64,
) -> GradCheckReport {
    let tape = Tape::new();
    let x = tape.leaf(shape, x0.to_vec());
    let loss = f(&x);
    assert_eq!(
        loss.len(),
        1,
        "grad_check requires a scalar-valued function, got shape {:?}",
        loss.shape()
    );
    let grads = tape.backward(&loss).expect("grad_check uses a fresh tape");
    let analytic: Vec<f64> =
        grads.wrt(&x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x0.len()]);

    let mut numeric = vec![0.0; x0.len()];
    let mut buf = x0.to_vec();
    for i in 0..x0.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let fp = f(&Tensor::constant(shape, buf.clone())).item();
        buf[i] = orig - step;
        let fm = f(&Tensor::constant(shape, buf.clone())).item();
        buf[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * step);
    }

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..x0.len() {
        let denom = analytic[i].abs().max(numeric[i].abs()).max(REL_FLOOR);
        let rel = (analytic[i] - numeric[i]).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport { max_rel_err, worst_index, analytic, numeric, tol }
}

/// `grad_check` with the default step and tolerance.
pub fn grad_check_default(f: &dyn Fn(&Tensor) -> Tensor, shape: &[usize], x0: &[f64]) -> GradCheckReport {
    grad_check(f, shape, x0, FD_STEP, FD_TOL)
}
