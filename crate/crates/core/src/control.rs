//! Distribution-regression control function (DR-CF): an estimated control
//! variable `v̂ ≈ F_X(X | Z)` built from the grid of fitted quantiles, added
//! as a regressor in the outcome equation.

use nalgebra::DVector;

use crate::data::Dataset;
use crate::error::Result;
use crate::iv::{cluster_labels, ols_sandwich, CovarianceKind, FitMethod, IvFit};
use crate::linalg;
use crate::quantile::{FirstStageFit, QuantileGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariable {
    pub v_hat: DVector<f64>,
    pub grid: QuantileGrid,
    /// Rows with crossing fitted quantiles in the first stage.
    pub crossing_rows: usize,
    pub warnings: Vec<String>,
}

/// `v̂_i = τ₁ + step · #{k : ĝ_k(Z_i) ≤ X_i}`, clamped to `[τ₁, τ_K]`.
pub fn estimate_control(fit: &FirstStageFit, x: &DVector<f64>) -> Result<ControlVariable> {
    let g = &fit.dictionary;
    if g.nrows() != x.len() {
        return Err(crate::QlsError::Dimension(format!(
            "first-stage fit has {} rows, X has {}",
            g.nrows(),
            x.len()
        )));
    }
    let (lo, hi, step) = (fit.grid.first(), fit.grid.last(), fit.grid.step());
    let v_hat = DVector::from_fn(x.len(), |i, _| {
        let below = g.row(i).iter().filter(|&&q| q <= x[i]).count();
        (lo + step * below as f64).clamp(lo, hi)
    });
    let mut warnings = Vec::new();
    if v_hat.iter().all(|&v| v == v_hat[0]) {
        warnings.push(format!("control variable is constant ({})", v_hat[0]));
    }
    Ok(ControlVariable {
        v_hat,
        grid: fit.grid.clone(),
        crossing_rows: fit.crossing_rows,
        warnings,
    })
}

/// OLS of `Y` on `(1, X, Z₁, v̂)` with robust standard errors treating `v̂`
/// as known. Coefficients are ordered `(α, β, γ…, β_v)`. A constant `v̂`
/// is dropped and the fit carries a non-identified-control warning.
pub fn fit_drcf(data: &Dataset, fit: &FirstStageFit, covariance: CovarianceKind) -> Result<IvFit> {
    let control = estimate_control(fit, &data.endogenous)?;
    let clusters = cluster_labels(data, covariance)?;
    let n = data.len();
    let q = data.controls.ncols();
    let constant = control.v_hat.iter().all(|&v| v == control.v_hat[0]);
    let mut blocks = vec![linalg::ones(n), data.endogenous.clone()];
    blocks.extend(data.controls.column_iter().map(|c| c.into_owned()));
    if !constant {
        blocks.push(control.v_hat.clone());
    }
    let refs: Vec<&DVector<f64>> = blocks.iter().collect();
    let design = linalg::hstack(&refs);
    let (theta, vcov, residuals) = ols_sandwich(&design, &data.outcome, covariance, clusters)?;
    let mut names = vec!["(intercept)".to_string(), "x".to_string()];
    names.extend(data.control_names.iter().cloned());
    let mut warnings = control.warnings;
    if constant {
        warnings.push(
            "non-identified control: constant v_hat dropped from the outcome regression".into(),
        );
    } else {
        names.push("v_hat".into());
    }
    debug_assert_eq!(names.len(), 2 + q + usize::from(!constant));
    Ok(IvFit {
        se: DVector::from_fn(vcov.nrows(), |j, _| vcov[(j, j)].max(0.0).sqrt()),
        theta,
        vcov,
        names,
        method: FitMethod::ControlFunction,
        n,
        residuals,
        first_stage_f: None,
        warnings,
    })
}
