use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest |analytic - numeric| over all entries.
    pub max_abs_error: f64,
    /// Smallest distance of any relu/l1 input from its kink at the probe point.
    pub kink_margin: f64,
    pub pass: bool,
}

const REL_FLOOR: f64 = 1e-8;

/// Checks `build` (params -> scalar loss) at `params`.
///
/// Each entry is perturbed by ±`step` and the difference quotient is
/// compared against the tape gradient, with relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradient<F>(build: F, params: &[Matrix], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::Config(format!(
            "check_gradient needs step > 0 and tol > 0 (got {step}, {tol})"
        )));
    }
    let (analytic, kink_margin) = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.var(p.clone())).collect();
        let root = build(&tape, &vars)?;
        (tape.gradient(root, &vars)?, tape.min_kink_distance())
    };

    let eval = |probe: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|p| tape.var(p.clone())).collect();
        let v = build(&tape, &vars)?.scalar();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("loss is non-finite while probing".into()))
        }
    };

    let mut probe: Vec<Matrix> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = probe[pi].data()[e];
            probe[pi].data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        kink_margin,
        pass: max_rel <= tol,
    })
}
