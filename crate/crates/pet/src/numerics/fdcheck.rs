//! Central finite-difference gradient checking.
//!
//! The checker perturbs inputs numerically and recomputes the forward value,
//! so it is independent of the backward-pass code it verifies. It backs both
//! the unit tests and the `selftest` command.

use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over coordinates of |fd - analytic| / max(|fd|, |analytic|, 1e-6)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare `analytic` against central differences of `eval` around `x0`.
///
/// `eval` must return the scalar objective as a pure function of the flat
/// input vector.
pub fn check_grad(
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<FdReport> {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = eval(&x)?;
        x[i] = orig - h;
        let down = eval(&x)?;
        x[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = rel_err(fd, analytic[i]);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        worst_index: worst,
        checked: x0.len(),
    })
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-6)
}
