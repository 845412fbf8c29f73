//! First-stage strength diagnostics: the mean F, per-quantile F statistics
//! of the excluded-instrument terms, the distributional F of the quantile
//! dictionary, and the resulting rule-of-thumb label.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{QlsError, Result};
use crate::iv::{cluster_labels, ols_sandwich, CovarianceKind};
use crate::linalg::{self, PINV_RCOND};
use crate::quantile::{fit_quantile, quantile_vcov, FirstStageFit, SolverOptions};

/// Quantile levels always reported by [`diagnose`].
pub const DIAGNOSTIC_TAUS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

/// Threshold separating strong from weak first stages.
pub const STRONG_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionLabel {
    StrongMean,
    WeakMeanStrongDistributional,
    BothWeak,
    Unstable,
}

impl DecisionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionLabel::StrongMean => "strong mean",
            DecisionLabel::WeakMeanStrongDistributional => "weak mean / strong distributional",
            DecisionLabel::BothWeak => "both weak",
            DecisionLabel::Unstable => "unstable",
        }
    }

    pub fn advice(self) -> &'static str {
        match self {
            DecisionLabel::StrongMean => "use 2SLS with the mean instrument; report Q-LS as a robustness check",
            DecisionLabel::WeakMeanStrongDistributional => {
                "treat as a distributional IV setting; report Q-LS (regularised if K is large) as the main estimator"
            }
            DecisionLabel::BothWeak => "interpret IV estimates with caution; focus on reduced-form estimates",
            DecisionLabel::Unstable => "treat results as exploratory and investigate misspecification",
        }
    }
}

impl fmt::Display for DecisionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileF {
    pub tau: f64,
    pub f: f64,
    pub df: usize,
}

/// Point estimates used to flag disagreement between Q-LS and 2SLS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateComparison {
    pub qls_beta: f64,
    pub tsls_beta: f64,
}

impl EstimateComparison {
    /// Opposite signs, or magnitudes differing by more than a factor of two.
    pub fn differs_markedly(&self) -> bool {
        let (a, b) = (self.qls_beta, self.tsls_beta);
        if a.signum() != b.signum() && a != 0.0 && b != 0.0 {
            return true;
        }
        let (lo, hi) = (a.abs().min(b.abs()), a.abs().max(b.abs()));
        hi > 2.0 * lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub n: usize,
    pub mean_f: f64,
    pub mean_df: usize,
    /// F statistics at [`DIAGNOSTIC_TAUS`].
    pub quantile_f: Vec<QuantileF>,
    /// F statistics at every grid point of the first-stage fit.
    pub grid_f: Vec<QuantileF>,
    pub distributional_f: f64,
    /// Number of dictionary directions left after removing `(1, Z₁)`.
    pub distributional_df: usize,
    pub label: DecisionLabel,
    pub notes: Vec<String>,
}

impl DiagnosticsReport {
    /// Largest F among the fixed diagnostic quantiles.
    pub fn max_quantile_f(&self) -> f64 {
        self.quantile_f.iter().map(|q| q.f).fold(0.0, f64::max)
    }

    pub fn quantile_f_at(&self, tau: f64) -> Option<f64> {
        self.quantile_f
            .iter()
            .chain(&self.grid_f)
            .find(|q| (q.tau - tau).abs() < 1e-9)
            .map(|q| q.f)
    }
}

/// Rule-of-thumb label: strong mean when `F_mean ≥ 10`; otherwise strong
/// distributional when some diagnostic-quantile F reaches 10; otherwise
/// both weak. A strong-mean design whose Q-LS and 2SLS estimates disagree
/// markedly is labelled unstable.
pub fn decision_label(
    mean_f: f64,
    max_quantile_f: f64,
    comparison: Option<&EstimateComparison>,
) -> DecisionLabel {
    if mean_f >= STRONG_F {
        match comparison {
            Some(c) if c.differs_markedly() => DecisionLabel::Unstable,
            _ => DecisionLabel::StrongMean,
        }
    } else if max_quantile_f >= STRONG_F {
        DecisionLabel::WeakMeanStrongDistributional
    } else {
        DecisionLabel::BothWeak
    }
}

/// Robust Wald F for the excluded instruments in `X ~ (1, Z₁, Z₂)`.
pub fn mean_first_stage_f(data: &Dataset, covariance: CovarianceKind) -> Result<(f64, usize)> {
    if data.instruments.ncols() == 0 {
        return Err(QlsError::Config(
            "mean F needs at least one raw instrument".into(),
        ));
    }
    let clusters = cluster_labels(data, covariance)?;
    let design = linalg::hcat(&[&data.exogenous_block(), &data.instruments]);
    let (coef, vcov, _) = ols_sandwich(&design, &data.endogenous, covariance, clusters)?;
    let first = 1 + data.controls.ncols();
    let idx: Vec<usize> = (first..design.ncols()).collect();
    let w = linalg::wald_f(&coef, &vcov, &idx);
    Ok((w.f, w.df))
}

fn quantile_wald(
    design: &DMatrix<f64>,
    x: &DVector<f64>,
    coef: &DVector<f64>,
    tau: f64,
    idx: &[usize],
) -> Result<QuantileF> {
    let resid = x - design * coef;
    let vcov = quantile_vcov(design, &resid, tau)?;
    let w = linalg::wald_f(coef, &vcov, idx);
    Ok(QuantileF {
        tau,
        f: w.f,
        df: w.df,
    })
}

/// Distributional F: the dictionary is residualised on `(1, Z₁)`, reduced
/// to its numerically independent directions, and tested jointly with a
/// robust Wald statistic in the regression of `X` on `(1, Z₁, directions)`.
pub fn distributional_f(
    data: &Dataset,
    dictionary: &DMatrix<f64>,
    covariance: CovarianceKind,
) -> Result<(f64, usize, Vec<String>)> {
    let clusters = cluster_labels(data, covariance)?;
    let exo = data.exogenous_block();
    let mut notes = Vec::new();
    let exo_coef = linalg::pinv(&exo, PINV_RCOND).0 * dictionary;
    let resid = dictionary - &exo * exo_coef;
    let scale = dictionary
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    let svd = resid.svd(true, false);
    let u = svd.u.expect("u requested");
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > 1e-9 * scale.max(f64::MIN_POSITIVE))
        .collect();
    let rank = keep.len();
    if rank == 0 {
        notes.push("dictionary lies in the span of (1, Z1); distributional F is zero".into());
        return Ok((0.0, 0, notes));
    }
    if rank < dictionary.ncols() {
        notes.push(format!(
            "dictionary has {rank} independent directions beyond (1, Z1) out of {} columns",
            dictionary.ncols()
        ));
    }
    let directions = linalg::select_columns(&u, &keep);
    let design = linalg::hcat(&[&exo, &directions]);
    let (coef, vcov, _) = ols_sandwich(&design, &data.endogenous, covariance, clusters)?;
    let idx: Vec<usize> = (exo.ncols()..design.ncols()).collect();
    let w = linalg::wald_f(&coef, &vcov, &idx);
    Ok((w.f, w.df, notes))
}

/// Full diagnostic report for a dataset and its first-stage fit.
pub fn diagnose(
    data: &Dataset,
    covariance: CovarianceKind,
    fit: &FirstStageFit,
    comparison: Option<&EstimateComparison>,
) -> Result<DiagnosticsReport> {
    if fit.dictionary.nrows() != data.len() {
        return Err(QlsError::Dimension(
            "first-stage fit and data have different row counts".into(),
        ));
    }
    let (mean_f, mean_df) = mean_first_stage_f(data, covariance)?;
    let basis = &fit.basis;
    let idx = &basis.instrument_columns;
    let x = &data.endogenous;

    let quantile_f = DIAGNOSTIC_TAUS
        .iter()
        .map(|&tau| {
            let q = fit_quantile(&basis.matrix, x, tau, &SolverOptions::default())?;
            quantile_wald(&basis.matrix, x, &q.coefficients, tau, idx)
        })
        .collect::<Result<Vec<_>>>()?;
    let grid_f = fit
        .grid
        .taus()
        .iter()
        .zip(&fit.coefficients)
        .map(|(&tau, coef)| quantile_wald(&basis.matrix, x, coef, tau, idx))
        .collect::<Result<Vec<_>>>()?;

    let (dist_f, dist_df, notes) = distributional_f(data, &fit.dictionary, covariance)?;
    let max_q = quantile_f.iter().map(|q| q.f).fold(0.0, f64::max);
    Ok(DiagnosticsReport {
        n: data.len(),
        mean_f,
        mean_df,
        quantile_f,
        grid_f,
        distributional_f: dist_f,
        distributional_df: dist_df,
        label: decision_label(mean_f, max_q, comparison),
        notes,
    })
}
