//! Central finite-difference check of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Coordinates checked when the input is too large to check exhaustively.
const SAMPLED_COORDS: usize = 96;
const EXHAUSTIVE_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares the backward gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// one-element loss. Relative error is `|analytic - numeric|` over
/// `max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let loss = f(&tape, input)?;
    tape.backward(loss)?;
    let analytic = tape.grad(input).expect("leaf gradient after backward");

    let eval = |probe: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.param(probe.clone());
        let l = f(&t, v)?;
        t.value(l).item()
    };

    let coords: Vec<usize> = if x.len() <= EXHAUSTIVE_LIMIT {
        (0..x.len()).collect()
    } else {
        (0..SAMPLED_COORDS).map(|j| (2 * j + 1) * x.len() / (2 * SAMPLED_COORDS)).collect()
    };
    let mut max_rel_error: f64 = 0.0;
    let mut probe = x.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        max_rel_error = max_rel_error.max(rel);
    }
    Ok(GradCheckReport {
        passed: max_rel_error < tol,
        max_rel_error,
        coords_checked: coords.len(),
    })
}
