//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! path with the reverse pass it verifies.
//!
//! A central difference is only an estimate of the derivative when `x ± h`
//! stay on the smooth piece containing `x`. Probes whose perturbed forward
//! pass takes a different branch at any ReLU, max-pool or similar kink (see
//! [`Tape::branch_digest`]) are counted in [`GradCheckReport::crossed`]
//! instead of being compared.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error of an analytic derivative against a numeric one:
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor for [`relative_error`].
    pub floor: f64,
    /// Upper bound on coordinates probed per input (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6, max_coords: usize::MAX }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub coords: usize,
    /// Coordinates skipped because a probe crossed a kink.
    pub crossed: usize,
    /// Input index and flat coordinate of the worst entry.
    pub worst: (usize, usize),
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_digest()))
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences on every (or every k-th) coordinate of every input.
pub fn check<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let branches = tape.branch_digest();

    let mut report = GradCheckReport { max_rel_err: 0.0, coords: 0, crossed: 0, worst: (0, 0) };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let n = inputs[i].numel();
        let stride = n.div_ceil(cfg.max_coords.min(n)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + cfg.step;
            let (plus, bp) = eval(&probe, &f)?;
            probe[i].data_mut()[j] = orig - cfg.step;
            let (minus, bm) = eval(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            if bp != branches || bm != branches {
                report.crossed += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[j], numeric, cfg.floor);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.coords += 1;
        }
    }
    Ok(report)
}
