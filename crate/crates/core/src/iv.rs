//! Structural estimation: two-stage least squares and plug-in OLS with
//! heteroskedasticity- and cluster-robust sandwich covariances.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{QlsError, Result};
use crate::linalg::{self, PINV_RCOND};

/// Where the excluded instrument(s) come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InstrumentSource {
    /// The raw excluded instruments stored in the dataset.
    Raw,
    /// A single generated instrument column.
    Generated(DVector<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceKind {
    /// Heteroskedasticity-robust (HC0) sandwich.
    #[default]
    Robust,
    /// Cluster-robust sandwich using the dataset's cluster labels.
    Cluster,
    /// Squared residuals replaced by their mean.
    Homoskedastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralSpec {
    pub instrument: InstrumentSource,
    pub covariance: CovarianceKind,
}

impl StructuralSpec {
    pub fn raw() -> Self {
        Self {
            instrument: InstrumentSource::Raw,
            covariance: CovarianceKind::Robust,
        }
    }

    pub fn generated(values: DVector<f64>) -> Self {
        Self {
            instrument: InstrumentSource::Generated(values),
            covariance: CovarianceKind::Robust,
        }
    }

    pub fn with_covariance(mut self, covariance: CovarianceKind) -> Self {
        self.covariance = covariance;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    TwoStageLeastSquares,
    OlsPlugin,
    ControlFunction,
}

impl FitMethod {
    pub fn tag(self) -> &'static str {
        match self {
            FitMethod::TwoStageLeastSquares => "2sls-analytic",
            FitMethod::OlsPlugin => "ols-plugin",
            FitMethod::ControlFunction => "control-function",
        }
    }
}

/// How the plug-in regressor is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PluginMode {
    /// `X̃ = P_[1, Z₁, instrument] X`; coefficients coincide with 2SLS.
    #[default]
    Projected,
    /// The generated instrument itself replaces `X`.
    Direct,
}

/// Normal critical value for two-sided 95% intervals.
pub const CRITICAL_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq)]
pub struct IvFit {
    /// `(α, β, γ…)`, plus `β_v` last for control-function fits.
    pub theta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub se: DVector<f64>,
    pub names: Vec<String>,
    pub method: FitMethod,
    pub n: usize,
    pub residuals: DVector<f64>,
    /// Robust first-stage F of the excluded instrument(s) given `(1, Z₁)`.
    pub first_stage_f: Option<f64>,
    pub warnings: Vec<String>,
}

impl IvFit {
    /// Coefficient on the endogenous regressor.
    pub fn beta(&self) -> f64 {
        self.theta[1]
    }

    pub fn beta_se(&self) -> f64 {
        self.se[1]
    }

    /// 95% normal interval for coefficient `j`.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let h = CRITICAL_95 * self.se[j];
        (self.theta[j] - h, self.theta[j] + h)
    }

    pub fn covers(&self, j: usize, value: f64) -> bool {
        (self.theta[j] - value).abs() <= CRITICAL_95 * self.se[j]
    }
}

fn excluded_block(data: &Dataset, spec: &StructuralSpec) -> Result<DMatrix<f64>> {
    let n = data.len();
    match &spec.instrument {
        InstrumentSource::Raw => {
            if data.instruments.ncols() == 0 {
                return Err(QlsError::Config("no excluded instruments supplied".into()));
            }
            Ok(data.instruments.clone())
        }
        InstrumentSource::Generated(v) => {
            if v.len() != n {
                return Err(QlsError::Dimension(format!(
                    "generated instrument has {} rows, data has {n}",
                    v.len()
                )));
            }
            Ok(DMatrix::from_column_slice(n, 1, v.as_slice()))
        }
    }
}

fn check_finite(data: &Dataset) -> Result<()> {
    let finite = data.outcome.iter().all(|v| v.is_finite())
        && data.endogenous.iter().all(|v| v.is_finite())
        && data.controls.iter().all(|v| v.is_finite())
        && data.instruments.iter().all(|v| v.is_finite());
    if finite {
        Ok(())
    } else {
        Err(QlsError::Domain("data contain non-finite values".into()))
    }
}

fn clusters_for<'a>(data: &'a Dataset, kind: CovarianceKind) -> Result<Option<&'a [usize]>> {
    match kind {
        CovarianceKind::Cluster => data.clusters.as_deref().map(Some).ok_or_else(|| {
            QlsError::Config("cluster-robust covariance requested but no cluster labels".into())
        }),
        _ => Ok(None),
    }
}

/// `[1, X, Z₁]`
fn regressor_stack(data: &Dataset, x: &DVector<f64>) -> DMatrix<f64> {
    let n = data.len();
    let q = data.controls.ncols();
    let mut s = DMatrix::zeros(n, 2 + q);
    s.column_mut(0).fill(1.0);
    s.set_column(1, x);
    s.view_mut((0, 2), (n, q)).copy_from(&data.controls);
    s
}

/// `[instrument(s), Z₁, 1]`
fn instrument_stack(data: &Dataset, excluded: &DMatrix<f64>) -> DMatrix<f64> {
    let n = data.len();
    let one = DMatrix::from_element(n, 1, 1.0);
    linalg::hcat(&[excluded, &data.controls, &one])
}

fn structural_names(data: &Dataset) -> Vec<String> {
    let mut names = vec!["(intercept)".to_string(), "x".to_string()];
    names.extend(data.control_names.iter().cloned());
    names
}

/// Orthonormal basis of the column span of `m` (left singular vectors above
/// the relative cutoff) and its rank.
fn span_basis(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > PINV_RCOND * smax && svd.singular_values[k] > 0.0)
        .collect();
    (linalg::select_columns(&u, &keep), keep.len())
}

/// `(D'D/n)⁻¹ meat (D'D/n)⁻¹ / n` with the meat chosen by `kind`.
fn sandwich(
    design: &DMatrix<f64>,
    bread_inv: &DMatrix<f64>,
    resid: &DVector<f64>,
    kind: CovarianceKind,
    clusters: Option<&[usize]>,
) -> DMatrix<f64> {
    let n = design.nrows() as f64;
    let meat = match kind {
        CovarianceKind::Homoskedastic => {
            let s2 = resid.norm_squared() / n;
            design.transpose() * design * (s2 / n)
        }
        _ => linalg::score_meat(design, resid, clusters),
    };
    linalg::symmetrize(&(bread_inv * meat * bread_inv / n))
}

fn standard_errors(vcov: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(vcov.nrows(), |j, _| vcov[(j, j)].max(0.0).sqrt())
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Invert `D'D/n`, reporting a weak-instrument error when it is singular.
fn bread_inverse(design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = design.nrows() as f64;
    let gram = design.transpose() * design / n;
    let sv = gram.singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > 1e-12 * smax) {
        return Err(QlsError::WeakInstrument {
            smallest_singular_value: smin,
        });
    }
    match gram.clone().cholesky() {
        Some(c) => Ok(linalg::symmetrize(&c.inverse())),
        None => Err(QlsError::WeakInstrument {
            smallest_singular_value: smallest_singular_value(&gram),
        }),
    }
}

/// Least squares of `y` on `design` through QR, with a singularity check
/// that reports a weak-instrument error.
fn solve_ls(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    linalg::ols(design, y).map_err(|e| match e {
        QlsError::Singular(_) => QlsError::WeakInstrument {
            smallest_singular_value: smallest_singular_value(
                &(design.transpose() * design / design.nrows() as f64),
            ),
        },
        other => other,
    })
}

/// Robust first-stage F of the leading `n_excluded` columns of `m` in the
/// regression of `x` on `m`.
fn first_stage_f(
    m: &DMatrix<f64>,
    x: &DVector<f64>,
    n_excluded: usize,
    clusters: Option<&[usize]>,
) -> Option<f64> {
    let coef = linalg::ols(m, x).ok()?;
    let resid = x - m * &coef;
    let n = m.nrows() as f64;
    let bread = (m.transpose() * m / n).cholesky()?.inverse();
    let vcov = linalg::symmetrize(&(&bread * linalg::score_meat(m, &resid, clusters) * &bread / n));
    let idx: Vec<usize> = (0..n_excluded).collect();
    Some(linalg::wald_f(&coef, &vcov, &idx).f)
}

/// Two-stage least squares `θ̂ = (S'P_M S)⁻¹S'P_M y` with the sandwich
/// covariance `(ÂQ̂⁻¹Â')⁻¹ÂQ̂⁻¹Ω̂Q̂⁻¹Â'(ÂQ̂⁻¹Â')⁻¹ / n`.
pub fn fit_2sls(data: &Dataset, spec: &StructuralSpec) -> Result<IvFit> {
    check_finite(data)?;
    let clusters = clusters_for(data, spec.covariance)?;
    let excluded = excluded_block(data, spec)?;
    let s = regressor_stack(data, &data.endogenous);
    let m = instrument_stack(data, &excluded);
    if m.ncols() < s.ncols() {
        return Err(QlsError::Dimension(format!(
            "{} instruments cannot identify {} coefficients",
            m.ncols(),
            s.ncols()
        )));
    }
    let (basis, _) = span_basis(&m);
    // rows of ŝ are Â Q̂⁻¹ M_i
    let s_hat = &basis * (basis.transpose() * &s);
    let bread = bread_inverse(&s_hat)?;
    let theta = solve_ls(&s_hat, &data.outcome)?;
    let residuals = &data.outcome - &s * &theta;
    let vcov = sandwich(&s_hat, &bread, &residuals, spec.covariance, clusters);
    let n_excluded = excluded.ncols();
    Ok(IvFit {
        se: standard_errors(&vcov),
        theta,
        vcov,
        names: structural_names(data),
        method: FitMethod::TwoStageLeastSquares,
        n: data.len(),
        residuals,
        first_stage_f: first_stage_f(&m, &data.endogenous, n_excluded, clusters),
        warnings: Vec::new(),
    })
}

/// Orthogonal projection of `x` onto the span of `(1, Z₁, instrument
/// columns)`; rank deficiency is absorbed by the minimum-norm solver.
pub fn project_regressor(
    x: &DVector<f64>,
    z1: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
) -> DVector<f64> {
    let n = x.len();
    let one = DMatrix::from_element(n, 1, 1.0);
    let m = linalg::hcat(&[&one, z1, instruments]);
    let (basis, _) = span_basis(&m);
    &basis * (basis.transpose() * x)
}

/// Plug-in OLS: regress `Y` on `(1, X̃, Z₁)` and report robust OLS standard
/// errors that treat `X̃` as fixed.
pub fn fit_plugin_ols(data: &Dataset, spec: &StructuralSpec, mode: PluginMode) -> Result<IvFit> {
    check_finite(data)?;
    let clusters = clusters_for(data, spec.covariance)?;
    let excluded = excluded_block(data, spec)?;
    let x_tilde = match mode {
        PluginMode::Projected => project_regressor(&data.endogenous, &data.controls, &excluded),
        PluginMode::Direct => {
            if excluded.ncols() != 1 {
                return Err(QlsError::Config(format!(
                    "direct plug-in needs exactly one instrument column, got {}",
                    excluded.ncols()
                )));
            }
            excluded.column(0).into_owned()
        }
    };
    let design = regressor_stack(data, &x_tilde);
    let bread = bread_inverse(&design)?;
    let theta = solve_ls(&design, &data.outcome)?;
    let residuals = &data.outcome - &design * &theta;
    let vcov = sandwich(&design, &bread, &residuals, spec.covariance, clusters);
    let m = instrument_stack(data, &excluded);
    Ok(IvFit {
        se: standard_errors(&vcov),
        theta,
        vcov,
        names: structural_names(data),
        method: FitMethod::OlsPlugin,
        n: data.len(),
        residuals,
        first_stage_f: first_stage_f(&m, &data.endogenous, excluded.ncols(), clusters),
        warnings: Vec::new(),
    })
}

/// OLS with a robust (or clustered, or homoskedastic) sandwich; used by the
/// control-function estimator and the diagnostics.
pub fn ols_sandwich(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    kind: CovarianceKind,
    clusters: Option<&[usize]>,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let bread = bread_inverse(design)?;
    let theta = solve_ls(design, y)?;
    let resid = y - design * &theta;
    let vcov = sandwich(design, &bread, &resid, kind, clusters);
    Ok((theta, vcov, resid))
}

pub(crate) fn cluster_labels(data: &Dataset, kind: CovarianceKind) -> Result<Option<&[usize]>> {
    clusters_for(data, kind)
}
