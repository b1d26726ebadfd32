//! Browser bindings for three small interactive views of the lab:
//! the Bayes posterior of the two-task factor model, a correlation sweep of
//! the jointly trained classifier, and factor recovery on planted data.
//!
//! The `*_report` functions are plain Rust so they can be tested natively;
//! the exported wrappers only serialise their results for JavaScript.

use serde::Serialize;
use tc2_core::calibration::{batch_stats, extract_factors, fit_factors, planted_basis, FvParams, GdOptions};
use tc2_core::rng::LabRng;
use tc2_core::scm::{bayes_posterior, verify_theorem1, ScmConfig};
use tc2_core::{Matrix, Result};
use wasm_bindgen::prelude::*;

/// Largest sample count the sweep accepts; keeps the page responsive.
pub const MAX_SWEEP_N: usize = 50_000;

fn scalar_model(c_ij: f64) -> ScmConfig {
    ScmConfig::symmetric(1, 1.0, 1.0, c_ij)
}

/// `P(Y_i = +1 | f_u_i, f_u_j)` for the one-dimensional symmetric model.
pub fn posterior_value(c_ij: f64, f_u_i: f64, f_u_j: f64) -> Result<f64> {
    bayes_posterior(&scalar_model(c_ij), &[f_u_i], &[f_u_j], 1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub c_ij: f64,
    pub weight_j: f64,
    pub weight_norm_j: f64,
    pub bayes_agreement: f64,
}

/// Fits the task-`i` classifier at each correlation with a single seed.
pub fn sweep_report(correlations: &[f64], n: usize, seed: u64) -> Result<Vec<SweepPoint>> {
    if n > MAX_SWEEP_N {
        return Err(tc2_core::Error::Config(format!(
            "sweep n is capped at {MAX_SWEEP_N}, got {n}"
        )));
    }
    correlations
        .iter()
        .map(|&c| {
            let r = verify_theorem1(&scalar_model(c), n, seed)?;
            Ok(SweepPoint {
                c_ij: c,
                weight_j: r.weights_on_f_u_j[0],
                weight_norm_j: r.weight_norm_j,
                bayes_agreement: r.bayes_agreement,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    /// Loss before each step, thinned to at most 100 points.
    pub loss: Vec<f64>,
    /// `‖VᵀV − I‖_F` of the recovered basis.
    pub orthogonality_defect: f64,
    /// `‖B − VVᵀB‖_F / ‖B‖_F` against the planted basis `B`.
    pub subspace_residual: f64,
}

/// Plants an 8-factor basis in 16 dimensions and fits the factor network.
pub fn recovery_report(active: usize, noise: f64, steps: usize, seed: u64) -> Result<RecoveryReport> {
    let planted = planted_basis(16, 8, 256, active, noise, seed)?;
    let mut fv = FvParams::init(16, 8, 64, &mut LabRng::derived(seed, 7));
    let history = fit_factors(&mut fv, &planted.z, &GdOptions::constant(steps, 1e-3))?;
    let basis = extract_factors(&fv, &batch_stats(&planted.z)?)?;
    let stride = history.len().div_ceil(100).max(1);
    let loss = history.iter().step_by(stride).copied().collect();
    let b = &planted.basis;
    let projected: Matrix = basis.v.matmul(&basis.v.t_matmul(b)?)?;
    Ok(RecoveryReport {
        loss,
        orthogonality_defect: basis.orthogonality_defect(),
        subspace_residual: b.sub(&projected)?.frobenius() / b.frobenius(),
    })
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(value).map_err(js_err)
}

#[wasm_bindgen]
pub fn posterior(c_ij: f64, f_u_i: f64, f_u_j: f64) -> std::result::Result<f64, JsError> {
    posterior_value(c_ij, f_u_i, f_u_j).map_err(js_err)
}

/// JSON array of sweep points.
#[wasm_bindgen]
pub fn sweep(correlations: &[f64], n: usize, seed: u32) -> std::result::Result<String, JsError> {
    to_json(&sweep_report(correlations, n, u64::from(seed)).map_err(js_err)?)
}

/// JSON recovery report.
#[wasm_bindgen]
pub fn recover(active: usize, noise: f64, steps: usize, seed: u32) -> std::result::Result<String, JsError> {
    to_json(&recovery_report(active, noise, steps, u64::from(seed)).map_err(js_err)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_ignores_other_block_without_correlation() {
        for fj in [-2.0, 0.0, 3.0] {
            let p = posterior_value(0.5, 0.7, fj).unwrap();
            // log-odds reduce to 2·f_u_i when the labels are independent
            assert!((p - 1.0 / (1.0 + (-1.4f64).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_moves_with_other_block_under_correlation() {
        let lo = posterior_value(0.9, 0.0, -1.0).unwrap();
        let hi = posterior_value(0.9, 0.0, 1.0).unwrap();
        assert!(lo < 0.5 && hi > 0.5);
        assert!((lo + hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_rejects_bad_correlation() {
        assert!(posterior_value(1.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn sweep_weight_grows_with_correlation() {
        let pts = sweep_report(&[0.5, 0.7, 0.9], 20_000, 3).unwrap();
        assert!(pts[0].weight_norm_j < 0.05);
        assert!(pts.windows(2).all(|w| w[1].weight_norm_j > w[0].weight_norm_j));
        assert!(pts.iter().all(|p| p.weight_norm_j == p.weight_j.abs()));
    }

    #[test]
    fn sweep_caps_sample_count() {
        assert!(sweep_report(&[0.5], MAX_SWEEP_N + 1, 0).is_err());
    }

    #[test]
    fn recovery_finds_planted_subspace() {
        let r = recovery_report(2, 0.01, 1500, 1).unwrap();
        assert!(r.loss.len() <= 100);
        assert!(r.loss.last().unwrap() < &r.loss[0]);
        assert!(r.orthogonality_defect < 1e-8);
        assert!(r.subspace_residual < 0.1, "residual {}", r.subspace_residual);
    }

    #[test]
    fn recovery_rejects_too_many_active_factors() {
        assert!(recovery_report(9, 0.01, 10, 0).is_err());
    }
}
