mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::{gauss_jordan_inverse, iv_dataset, normal_mat, normal_vec, rng};
use qls_core::diagnostics::{diagnose, distributional_f, mean_first_stage_f, DecisionLabel};
use qls_core::iv::{
    fit_2sls, fit_plugin_ols, project_regressor, CovarianceKind, PluginMode, StructuralSpec,
};
use qls_core::linalg;
use qls_core::quantile::{fit_first_stage, BasisSpec, QuantileGrid, SolverOptions};
use qls_core::Dataset;

fn stacks(data: &Dataset, instrument: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = data.len();
    let one = DMatrix::from_element(n, 1, 1.0);
    let x = DMatrix::from_column_slice(n, 1, data.endogenous.as_slice());
    let s = linalg::hcat(&[&one, &x, &data.controls]);
    let m = linalg::hcat(&[instrument, &data.controls, &one]);
    (s, m)
}

/// `θ̂ = (S'P_M S)⁻¹ S'P_M y` and the sandwich
/// `(ÂQ̂⁻¹Â')⁻¹ÂQ̂⁻¹Ω̂Q̂⁻¹Â'(ÂQ̂⁻¹Â')⁻¹/n`, all by explicit small-matrix
/// arithmetic.
fn explicit_2sls(
    data: &Dataset,
    instrument: &DMatrix<f64>,
    homoskedastic: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let (s, m) = stacks(data, instrument);
    let n = data.len() as f64;
    let q = m.transpose() * &m / n;
    let qi = gauss_jordan_inverse(&q);
    let a = s.transpose() * &m / n;
    let core = gauss_jordan_inverse(&(&a * &qi * a.transpose()));
    let theta = &core * &a * &qi * (m.transpose() * &data.outcome / n);
    let resid = &data.outcome - &s * &theta;
    let mut omega = DMatrix::zeros(m.ncols(), m.ncols());
    let s2 = resid.norm_squared() / n;
    for i in 0..data.len() {
        let mi = m.row(i).transpose();
        let e2 = if homoskedastic {
            s2
        } else {
            resid[i] * resid[i]
        };
        omega += &mi * mi.transpose() * e2;
    }
    omega /= n;
    let vcov = &core * &a * &qi * omega * &qi * a.transpose() * &core / n;
    (theta, vcov)
}

fn hand_dataset() -> Dataset {
    let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0, 4.0, 6.5]);
    let x = DVector::from_vec(vec![0.5, 1.5, 1.0, 2.5, 2.0, 3.0]);
    let z1 = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let z2 = DMatrix::from_column_slice(6, 1, &[0.2, 0.9, 0.7, 1.8, 1.1, 2.4]);
    Dataset::new(y, x, z1, z2).unwrap()
}

#[test]
fn hand_dataset_matches_explicit_formula() {
    let d = hand_dataset();
    let fit = fit_2sls(&d, &StructuralSpec::raw()).unwrap();
    let (theta, vcov) = explicit_2sls(&d, &d.instruments, false);
    assert!((&fit.theta - theta).amax() < 1e-10);
    assert!((&fit.vcov - vcov).amax() < 1e-10);
    assert_eq!(fit.names, vec!["(intercept)", "x", "z1_1"]);
}

#[test]
fn homoskedastic_sandwich_reduces_to_classical_form() {
    let mut r = rng(301);
    let d = iv_dataset(&mut r, 80, 2);
    let spec = StructuralSpec::raw().with_covariance(CovarianceKind::Homoskedastic);
    let fit = fit_2sls(&d, &spec).unwrap();
    let (_, vcov) = explicit_2sls(&d, &d.instruments, true);
    assert!((&fit.vcov - &vcov).amax() < 1e-10);
    // σ̂²·(ÂQ̂⁻¹Â')⁻¹/n
    let (s, m) = stacks(&d, &d.instruments);
    let n = d.len() as f64;
    let a = s.transpose() * &m / n;
    let qi = gauss_jordan_inverse(&(m.transpose() * &m / n));
    let s2 = fit.residuals.norm_squared() / n;
    let classical = gauss_jordan_inverse(&(&a * qi * a.transpose())) * (s2 / n);
    assert!((&fit.vcov - classical).amax() < 1e-10);
}

#[test]
fn generated_instrument_scale_does_not_matter() {
    let mut r = rng(302);
    let d = iv_dataset(&mut r, 120, 1);
    let h = &d.instruments.column(0) * 2.0 + normal_vec(&mut r, 120) * 0.1;
    let base = fit_2sls(&d, &StructuralSpec::generated(h.clone())).unwrap();
    for c in [-3.0, 1e-3, 250.0] {
        let scaled = fit_2sls(&d, &StructuralSpec::generated(&h * c)).unwrap();
        assert!((&scaled.theta - &base.theta).amax() < 1e-10);
        assert!((&scaled.se - &base.se).amax() < 1e-10);
    }
}

#[test]
fn singleton_clusters_equal_robust() {
    let mut r = rng(303);
    let d = iv_dataset(&mut r, 90, 1);
    let labels: Vec<String> = (0..90).map(|i| format!("g{i}")).collect();
    let dc = d.clone().with_clusters(&labels).unwrap();
    let robust = fit_2sls(&d, &StructuralSpec::raw()).unwrap();
    let clustered = fit_2sls(
        &dc,
        &StructuralSpec::raw().with_covariance(CovarianceKind::Cluster),
    )
    .unwrap();
    assert!((robust.se - clustered.se).amax() < 1e-10);
}

#[test]
fn projection_matches_hat_matrix() {
    let mut r = rng(304);
    let x = normal_vec(&mut r, 10);
    let z1 = normal_mat(&mut r, 10, 1);
    let inst = normal_mat(&mut r, 10, 1);
    let one = DMatrix::from_element(10, 1, 1.0);
    let m = linalg::hcat(&[&one, &z1, &inst]);
    let hat = &m * gauss_jordan_inverse(&(m.transpose() * &m)) * m.transpose();
    let p = project_regressor(&x, &z1, &inst);
    assert!((&p - &hat * &x).amax() < 1e-10);
    assert!((project_regressor(&p, &z1, &inst) - &p).amax() < 1e-10);
    let reduced = project_regressor(&x, &z1, &DMatrix::zeros(10, 0));
    let m0 = linalg::hcat(&[&one, &z1]);
    let hat0 = &m0 * gauss_jordan_inverse(&(m0.transpose() * &m0)) * m0.transpose();
    assert!((reduced - hat0 * &x).amax() < 1e-10);
    let in_span = &m * DVector::from_vec(vec![1.0, -2.0, 0.5]);
    assert!((project_regressor(&in_span, &z1, &inst) - &in_span).amax() < 1e-10);
}

#[test]
fn exogenous_regressor_in_span_gives_ols() {
    let mut r = rng(305);
    let d = iv_dataset(&mut r, 50, 1);
    let spec = StructuralSpec::generated(d.endogenous.clone());
    let plugin = fit_plugin_ols(&d, &spec, PluginMode::Projected).unwrap();
    let (s, _) = stacks(&d, &d.instruments);
    let ols = linalg::ols(&s, &d.outcome).unwrap();
    assert!((plugin.theta - ols).amax() < 1e-10);
}

#[test]
fn near_deterministic_first_stage_is_strong() {
    let mut r = rng(306);
    let n = 1000;
    let z1 = normal_mat(&mut r, n, 1);
    let z2 = normal_mat(&mut r, n, 1);
    let x = DVector::from_fn(n, |i, _| z2[(i, 0)]) + normal_vec(&mut r, n) * 0.01;
    let y = &x + normal_vec(&mut r, n);
    let d = Dataset::new(y, x, z1, z2).unwrap();
    let (f, df) = mean_first_stage_f(&d, CovarianceKind::Robust).unwrap();
    assert_eq!(df, 1);
    assert!(f > 1e4, "{f}");
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let fit = fit_first_stage(
        &d,
        BasisSpec::QuadraticFull,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    let report = diagnose(&d, CovarianceKind::Robust, &fit, None).unwrap();
    assert_eq!(report.label, DecisionLabel::StrongMean);
    assert_eq!(report.quantile_f.len(), 5);
    assert_eq!(report.grid_f.len(), 10);
}

#[test]
fn independent_noise_is_both_weak() {
    let mut r = rng(307);
    let n = 1000;
    let d = Dataset::new(
        normal_vec(&mut r, n),
        normal_vec(&mut r, n),
        normal_mat(&mut r, n, 1),
        normal_mat(&mut r, n, 1),
    )
    .unwrap();
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let fit = fit_first_stage(
        &d,
        BasisSpec::QuadraticFull,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    let report = diagnose(&d, CovarianceKind::Robust, &fit, None).unwrap();
    assert_eq!(report.label, DecisionLabel::BothWeak);
    assert!(report.mean_f < 10.0 && report.max_quantile_f() < 10.0);
}

#[test]
fn collinear_dictionary_reports_surviving_directions() {
    let mut r = rng(308);
    let d = iv_dataset(&mut r, 200, 1);
    let n = d.len();
    let one = DMatrix::from_element(n, 1, 1.0);
    let z2sq = d.instruments.map(|v| v * v);
    let dictionary = linalg::hcat(&[&one, &d.controls, &d.instruments, &z2sq]);
    let (f, df, notes) = distributional_f(&d, &dictionary, CovarianceKind::Robust).unwrap();
    assert_eq!(df, 2);
    assert!(f.is_finite() && f > 0.0);
    assert!(!notes.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_stage_least_squares_equals_plugin_ols(seed in 0u64..1_000_000, n in 20usize..50, k2 in 1usize..4) {
        let mut r = rng(seed);
        let d = iv_dataset(&mut r, n, k2);
        let spec = StructuralSpec::raw();
        let a = fit_2sls(&d, &spec).unwrap();
        let b = fit_plugin_ols(&d, &spec, PluginMode::Projected).unwrap();
        for j in 0..a.theta.len() {
            prop_assert!((a.theta[j] - b.theta[j]).abs() <= 1e-8 * a.theta[j].abs().max(1.0));
        }
    }

    #[test]
    fn covariance_is_symmetric_with_matching_errors(seed in 0u64..1_000_000, n in 20usize..80) {
        let mut r = rng(seed);
        let d = iv_dataset(&mut r, n, 2);
        let fit = fit_2sls(&d, &StructuralSpec::raw()).unwrap();
        prop_assert!((&fit.vcov - fit.vcov.transpose()).amax() <= 1e-10);
        for j in 0..fit.se.len() {
            prop_assert!((fit.se[j] - fit.vcov[(j, j)].sqrt()).abs() <= 1e-14 * (1.0 + fit.se[j]));
            let (lo, hi) = fit.interval(j);
            prop_assert!(((hi - lo) / 2.0 - 1.96 * fit.se[j]).abs() <= 1e-12 * (1.0 + fit.se[j]));
        }
    }
}
