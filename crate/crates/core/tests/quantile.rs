mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use common::{design_with_intercept, normal_vec, rng, subsets};
use qls_core::linalg;
use qls_core::quantile::{
    check_objective, fit_first_stage, fit_quantile, BasisSpec, InstrumentBasis, QuantileGrid,
    SolverOptions,
};
use qls_core::sim::{generate, Design, DgpSpec};

/// Minimum of the check loss over all basic solutions (fits that
/// interpolate `p` observations). A linear program attains its optimum at a
/// vertex, so this is the exact minimum.
fn vertex_oracle(design: &DMatrix<f64>, x: &DVector<f64>, tau: f64) -> f64 {
    let p = design.ncols();
    let mut best = f64::INFINITY;
    for rows in subsets(design.nrows(), p) {
        let a = linalg::select_rows(design, &rows);
        let b = linalg::select_rows_vec(x, &rows);
        if let Some(sol) = a.lu().solve(&b) {
            if sol.iter().all(|v| v.is_finite()) {
                best = best.min(check_objective(design, x, &sol, tau));
            }
        }
    }
    best
}

#[test]
fn matches_exhaustive_vertex_oracle() {
    let mut r = rng(101);
    for case in 0..30 {
        let p = 2 + case % 2;
        let design = design_with_intercept(&mut r, 25, p);
        let x = &design * DVector::from_fn(p, |j, _| 0.5 * j as f64) + normal_vec(&mut r, 25);
        let tau = [0.1, 0.25, 0.5, 0.8, 0.95][case % 5];
        let fit = fit_quantile(&design, &x, tau, &SolverOptions::default()).unwrap();
        let oracle = vertex_oracle(&design, &x, tau);
        assert!(
            fit.objective <= oracle + 1e-4,
            "case {case}: {} vs {oracle}",
            fit.objective
        );
        assert!(fit.objective >= oracle - 1e-9);
    }
}

#[test]
fn subgradient_condition_holds() {
    let mut r = rng(102);
    let n = 400;
    let design = design_with_intercept(&mut r, n, 4);
    let x = &design * DVector::from_vec(vec![1.0, 0.5, -1.0, 2.0]) + normal_vec(&mut r, n);
    for &tau in &[0.1, 0.5, 0.9] {
        let fit = fit_quantile(&design, &x, tau, &SolverOptions::default()).unwrap();
        let resid = &x - &design * &fit.coefficients;
        // at a vertex p residuals are zero; their signs are free in [tau-1, tau]
        let free: Vec<usize> = (0..n).filter(|&i| resid[i].abs() <= 1e-9).collect();
        let mut grad = DVector::zeros(4);
        for i in 0..n {
            if resid[i].abs() > 1e-9 {
                let s = if resid[i] < 0.0 { tau - 1.0 } else { tau };
                grad += design.row(i).transpose() * s;
            }
        }
        // the free residuals must be able to absorb the gradient: each
        // contributes at most one design row, so the bound is p rows
        let slack: f64 = free.iter().map(|&i| design.row(i).abs().max()).sum::<f64>() + 1e-8;
        for j in 0..4 {
            assert!(
                grad[j].abs() / n as f64 <= slack / n as f64,
                "tau {tau}, coord {j}"
            );
        }
    }
}

#[test]
fn design_a_median_column_tracks_least_squares_fit() {
    let data = generate(&DgpSpec::new(Design::A, 10_000, 5), 0).unwrap();
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let fit = fit_first_stage(
        &data,
        BasisSpec::QuadraticFull,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    assert_eq!(fit.dictionary.ncols(), 10);
    let k = grid
        .taus()
        .iter()
        .position(|t| (t - 0.51).abs() < 1e-12)
        .unwrap();
    let basis = InstrumentBasis::build(BasisSpec::QuadraticFull, &data).unwrap();
    let ols = linalg::ols(&basis.matrix, &data.endogenous).unwrap();
    let fitted = &basis.matrix * ols;
    let corr = linalg::correlation(&fit.dictionary.column(k).into_owned(), &fitted);
    assert!(corr > 0.99, "corr {corr}");
    for (k, coef) in fit.coefficients.iter().enumerate() {
        let col = &basis.matrix * coef;
        assert!((col - fit.dictionary.column(k)).amax() < 1e-10);
    }
}

#[test]
fn location_model_columns_differ_by_constants() {
    let gap_spread = |n: usize| {
        let mut r = rng(103 + n as u64);
        let mut design = DMatrix::from_fn(n, 3, |_, _| r.random_range(-1.0..1.0));
        design.column_mut(0).fill(1.0);
        let x = &design * DVector::from_vec(vec![1.0, 2.0, -1.0]) + normal_vec(&mut r, n);
        let a = fit_quantile(&design, &x, 0.3, &SolverOptions::default()).unwrap();
        let b = fit_quantile(&design, &x, 0.7, &SolverOptions::default()).unwrap();
        let gap = &design * (b.coefficients - a.coefficients);
        gap.max() - gap.min()
    };
    let small = gap_spread(400);
    let large = gap_spread(25_600);
    assert!(large < 0.5 * small, "{large} vs {small}");
    assert!(large < 0.1, "{large}");
}

#[test]
fn fitted_quantiles_rarely_cross_on_design_a() {
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let mut crossing = 0;
    for seed in 0..5 {
        let data = generate(&DgpSpec::new(Design::A, 1000, seed), 0).unwrap();
        let fit = fit_first_stage(
            &data,
            BasisSpec::QuadraticFull,
            &grid,
            &SolverOptions::default(),
        )
        .unwrap();
        let rows = (0..1000)
            .filter(|&i| (1..fit.k()).any(|k| fit.dictionary[(i, k)] < fit.dictionary[(i, k - 1)]))
            .count();
        assert_eq!(rows, fit.crossing_rows);
        crossing += rows;
    }
    let rate = crossing as f64 / 5000.0;
    assert!(rate <= 0.01, "crossing rate {rate}");
}

#[test]
fn fitted_objective_never_exceeds_zero_coefficients() {
    let data = generate(&DgpSpec::new(Design::C, 300, 7), 0).unwrap();
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let fit = fit_first_stage(
        &data,
        BasisSpec::QuadraticNoInstrumentSquares,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    let zero = DVector::zeros(fit.basis.dim());
    for (coef, &tau) in fit.coefficients.iter().zip(grid.taus()) {
        let x = &data.endogenous;
        assert!(
            check_objective(&fit.basis.matrix, x, coef, tau)
                <= check_objective(&fit.basis.matrix, x, &zero, tau)
        );
    }
}

#[test]
fn collinear_instrument_is_named() {
    let mut data = generate(&DgpSpec::new(Design::A, 50, 8), 0).unwrap();
    data.instruments
        .column_mut(0)
        .copy_from(&data.controls.column(0).into_owned());
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let err =
        fit_first_stage(&data, BasisSpec::Linear, &grid, &SolverOptions::default()).unwrap_err();
    assert!(err.to_string().contains("z2_1"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scaling_the_response_scales_coefficients(seed in 0u64..10_000, c in 0.1f64..20.0, tau in 0.05f64..0.95) {
        let mut r = rng(seed);
        let design = design_with_intercept(&mut r, 60, 3);
        let x = &design * DVector::from_vec(vec![0.3, 1.0, -0.5]) + normal_vec(&mut r, 60);
        let a = fit_quantile(&design, &x, tau, &SolverOptions::default()).unwrap();
        let b = fit_quantile(&design, &(&x * c), tau, &SolverOptions::default()).unwrap();
        let scale = a.coefficients.amax().max(1.0) * c;
        prop_assert!((b.coefficients - a.coefficients * c).amax() <= 1e-6 * scale);
    }

    #[test]
    fn grids_stay_inside_the_trim(step in 0.001f64..0.4) {
        let g = QuantileGrid::trimmed(step).unwrap();
        prop_assert!(g.taus().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(g.first() >= 0.01 - 1e-15 && g.last() <= 0.99 + 1e-12);
    }
}
