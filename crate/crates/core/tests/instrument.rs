mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::{gauss_jordan_inverse, normal_mat, normal_vec, rng, subsets};
use qls_core::instrument::{
    build_instrument, cv_curve, default_penalty_grid, fold_assignment, select_penalty_cv,
    weights_lasso_with, weights_ols, weights_ridge, LassoOptions, LassoProblem, LassoVariant,
    Penalty, PenaltyKind, WeightKind, WeightMethod,
};
use qls_core::linalg;
use qls_core::quantile::{fit_first_stage, BasisSpec, QuantileGrid, SolverOptions};
use qls_core::sim::{generate, Design, DgpSpec};
use qls_core::QlsError;

fn raw() -> LassoOptions {
    LassoOptions {
        standardize: false,
        ..LassoOptions::default()
    }
}

fn normal_equations(g: &DMatrix<f64>, x: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let n = g.nrows() as f64;
    let mut gram = g.transpose() * g;
    for j in 0..gram.nrows() {
        gram[(j, j)] += n * ridge;
    }
    gauss_jordan_inverse(&gram) * (g.transpose() * x)
}

#[test]
fn ols_weights_match_explicit_normal_equations() {
    let mut r = rng(201);
    let g = normal_mat(&mut r, 20, 3);
    let x = normal_vec(&mut r, 20);
    let w = weights_ols(&g, &x).unwrap();
    assert!((w.w - normal_equations(&g, &x, 0.0)).amax() < 1e-8);
}

#[test]
fn ridge_matches_explicit_inverse() {
    let mut r = rng(202);
    let g = normal_mat(&mut r, 20, 3);
    let x = normal_vec(&mut r, 20);
    let w = weights_ridge(&g, &x, 0.5).unwrap();
    assert!((w.w - normal_equations(&g, &x, 0.5)).amax() < 1e-10);
    let zero = weights_ridge(&g, &x, 0.0).unwrap();
    assert!((zero.w - weights_ols(&g, &x).unwrap().w).amax() < 1e-8);
}

#[test]
fn unpenalised_raw_lasso_is_ols() {
    let mut r = rng(203);
    let g = normal_mat(&mut r, 40, 4);
    let x = normal_vec(&mut r, 40);
    let w = weights_lasso_with(&g, &x, 0.0, LassoVariant::Coefficients, false, &raw()).unwrap();
    assert_eq!(w.support.as_ref().unwrap().len(), 4);
    assert!((w.w - weights_ols(&g, &x).unwrap().w).amax() < 1e-6);
}

#[test]
fn lasso_above_threshold_names_the_penalty() {
    let mut r = rng(204);
    let g = normal_mat(&mut r, 30, 3);
    let x = normal_vec(&mut r, 30);
    let lmax = (g.transpose() * &x).amax() * 2.0 / 30.0;
    match weights_lasso_with(
        &g,
        &x,
        lmax * 1.001,
        LassoVariant::Coefficients,
        false,
        &raw(),
    ) {
        Err(QlsError::DegenerateInstrument(msg)) => assert!(msg.contains("penalty"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

fn lasso_objective(g: &DMatrix<f64>, x: &DVector<f64>, w: &DVector<f64>, lambda: f64) -> f64 {
    (x - g * w).norm_squared() / g.nrows() as f64 + lambda * w.abs().sum()
}

/// Exhaustive LASSO oracle: for every support and sign pattern solve the
/// stationarity equations `2G_S'(x - G_S w_S)/n = λ s` and keep the
/// candidates whose signs agree and whose off-support correlations satisfy
/// `|2G_k'r|/n ≤ λ`.
fn enumeration_oracle(g: &DMatrix<f64>, x: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let (n, k) = g.shape();
    let nf = n as f64;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for size in 0..=k {
        for support in subsets(k, size) {
            for signs in 0..(1usize << size) {
                let s: Vec<f64> = (0..size)
                    .map(|b| if signs >> b & 1 == 1 { 1.0 } else { -1.0 })
                    .collect();
                let mut w = DVector::zeros(k);
                if size > 0 {
                    let gs = linalg::select_columns(g, &support);
                    let rhs =
                        gs.transpose() * x - DVector::from_vec(s.clone()) * (nf * lambda / 2.0);
                    let ws = gauss_jordan_inverse(&(gs.transpose() * &gs)) * rhs;
                    if (0..size).any(|a| ws[a] * s[a] <= 0.0) {
                        continue;
                    }
                    for (a, &j) in support.iter().enumerate() {
                        w[j] = ws[a];
                    }
                }
                let resid = x - g * &w;
                let feasible = (0..k)
                    .filter(|j| !support.contains(j))
                    .all(|j| (2.0 * g.column(j).dot(&resid) / nf).abs() <= lambda + 1e-12);
                if feasible {
                    let obj = lasso_objective(g, x, &w, lambda);
                    if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                        best = Some((obj, w));
                    }
                }
            }
        }
    }
    best.expect("some support satisfies the optimality conditions")
        .1
}

#[test]
fn lasso_matches_support_enumeration() {
    let mut r = rng(205);
    for case in 0..12 {
        let g = normal_mat(&mut r, 30, 4);
        let mut x = normal_vec(&mut r, 30) * 0.5;
        x += g.column(case % 4) * 2.0;
        let lmax = (g.transpose() * &x).amax() * 2.0 / 30.0;
        let lambda = lmax * [0.05, 0.2, 0.5, 0.8][case % 4];
        let oracle = enumeration_oracle(&g, &x, lambda);
        let got =
            weights_lasso_with(&g, &x, lambda, LassoVariant::Coefficients, false, &raw()).unwrap();
        let support: Vec<usize> = (0..4).filter(|&j| oracle[j] != 0.0).collect();
        assert_eq!(got.support.as_ref().unwrap(), &support, "case {case}");
        for j in 0..4 {
            assert_eq!(got.w[j].signum(), oracle[j].signum());
        }
        assert!((got.w - oracle).amax() < 1e-6, "case {case}");
    }
}

#[test]
fn singleton_candidate_grid_is_returned() {
    let mut r = rng(206);
    let g = normal_mat(&mut r, 50, 3);
    let x = normal_vec(&mut r, 50);
    for kind in [PenaltyKind::Ridge, PenaltyKind::Lasso] {
        assert_eq!(
            select_penalty_cv(&g, &x, 10, &[0.37], 1, kind).unwrap(),
            0.37
        );
    }
}

#[test]
fn noiseless_target_selects_zero_ridge_penalty() {
    let mut r = rng(207);
    let g = normal_mat(&mut r, 60, 3);
    let x = &g * DVector::from_vec(vec![1.0, -2.0, 0.5]);
    assert_eq!(
        select_penalty_cv(&g, &x, 10, &[10.0, 0.0], 3, PenaltyKind::Ridge).unwrap(),
        0.0
    );
}

#[test]
fn cv_curve_matches_an_independent_loop_on_design_c() {
    let data = generate(&DgpSpec::new(Design::C, 600, 8), 0).unwrap();
    let grid = QuantileGrid::trimmed(0.05).unwrap();
    let fit = fit_first_stage(
        &data,
        BasisSpec::QuadraticNoInstrumentSquares,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    let train: Vec<usize> = (0..300).collect();
    let g = linalg::select_rows(&fit.dictionary, &train);
    let x = linalg::select_rows_vec(&data.endogenous, &train);
    let candidates = default_penalty_grid(&g, &x, PenaltyKind::Ridge);
    assert_eq!(candidates.len(), 50);
    let seed = 99;
    let curve = cv_curve(&g, &x, 10, &candidates, seed, PenaltyKind::Ridge).unwrap();
    let folds = fold_assignment(300, 10, seed);
    let mut mse = vec![0.0; candidates.len()];
    for f in 0..10 {
        let tr: Vec<usize> = (0..300).filter(|&i| folds[i] != f).collect();
        let va: Vec<usize> = (0..300).filter(|&i| folds[i] == f).collect();
        let (g_tr, x_tr) = (
            linalg::select_rows(&g, &tr),
            linalg::select_rows_vec(&x, &tr),
        );
        let (g_va, x_va) = (
            linalg::select_rows(&g, &va),
            linalg::select_rows_vec(&x, &va),
        );
        for (c, &lambda) in candidates.iter().enumerate() {
            let w = weights_ridge(&g_tr, &x_tr, lambda).unwrap().w;
            mse[c] += (&x_va - &g_va * w).norm_squared() / 300.0;
        }
    }
    let best = (0..mse.len())
        .min_by(|&a, &b| mse[a].total_cmp(&mse[b]))
        .unwrap();
    assert_eq!(curve.best(), candidates[best]);
    for c in 0..mse.len() {
        assert!(
            (curve.mse[c] - mse[c]).abs() <= 1e-6 * mse[c].max(1e-12),
            "candidate {c}"
        );
    }
}

#[test]
fn cv_needs_enough_rows() {
    let mut r = rng(208);
    let g = normal_mat(&mut r, 5, 2);
    let x = normal_vec(&mut r, 5);
    assert!(matches!(
        select_penalty_cv(&g, &x, 10, &[1.0], 0, PenaltyKind::Ridge),
        Err(QlsError::Config(_))
    ));
}

#[test]
fn equal_weights_average_the_dictionary() {
    let data = generate(&DgpSpec::new(Design::A, 200, 9), 0).unwrap();
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let fit = fit_first_stage(
        &data,
        BasisSpec::QuadraticFull,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    let inst = build_instrument(
        &fit,
        &data.endogenous,
        &WeightMethod::new(WeightKind::Equal),
        0,
    )
    .unwrap();
    for i in 0..200 {
        let mean = fit.dictionary.row(i).sum() / 10.0;
        assert!((inst.values[i] - mean).abs() < 1e-12);
    }
}

#[test]
fn cross_validated_weights_use_the_held_out_half() {
    let data = generate(&DgpSpec::new(Design::A, 201, 10), 0).unwrap();
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let fit = fit_first_stage(
        &data,
        BasisSpec::QuadraticFull,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    let inst = build_instrument(
        &fit,
        &data.endogenous,
        &WeightMethod::new(WeightKind::Ridge),
        4,
    )
    .unwrap();
    let w = &inst.weights;
    assert_eq!(
        w.penalty_rows.as_ref().unwrap(),
        &(0..101).collect::<Vec<_>>()
    );
    assert_eq!(w.weight_rows, (101..201).collect::<Vec<_>>());
    let hold = linalg::select_rows(&fit.dictionary, &w.weight_rows);
    let x_hold = linalg::select_rows_vec(&data.endogenous, &w.weight_rows);
    let direct = weights_ridge(&hold, &x_hold, w.penalty.unwrap()).unwrap();
    assert!((&direct.w - &w.w).amax() < 1e-12);
    assert!((inst.values - &fit.dictionary * &w.w).amax() < 1e-12);
    let fixed = WeightMethod::new(WeightKind::Ridge).with_penalty(Penalty::Fixed(0.1));
    let all = build_instrument(&fit, &data.endogenous, &fixed, 4).unwrap();
    assert_eq!(all.weights.weight_rows.len(), 201);
}

#[test]
fn design_a_ols_instrument_tracks_linear_first_stage() {
    let data = generate(&DgpSpec::new(Design::A, 10_000, 11), 0).unwrap();
    let grid = QuantileGrid::trimmed(0.01).unwrap();
    let fit = fit_first_stage(
        &data,
        BasisSpec::QuadraticFull,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    let inst = build_instrument(
        &fit,
        &data.endogenous,
        &WeightMethod::new(WeightKind::Ols),
        0,
    )
    .unwrap();
    let ols = linalg::ols(&fit.basis.matrix, &data.endogenous).unwrap();
    let fitted = &fit.basis.matrix * ols;
    assert!(linalg::correlation(&inst.values, &fitted) > 0.99);
}

#[test]
fn design_b1_instrument_carries_no_mean_signal_beyond_z1() {
    let data = generate(&DgpSpec::new(Design::B { omega: 0.0 }, 100_000, 12), 0).unwrap();
    let grid = QuantileGrid::trimmed(0.1).unwrap();
    let fit = fit_first_stage(&data, BasisSpec::Linear, &grid, &SolverOptions::default()).unwrap();
    let inst = build_instrument(
        &fit,
        &data.endogenous,
        &WeightMethod::new(WeightKind::Equal),
        0,
    )
    .unwrap();
    let exo = data.exogenous_block();
    let (x_fit, _) = linalg::project(&exo, &data.endogenous);
    let (v_fit, _) = linalg::project(&exo, &inst.values);
    let corr = linalg::correlation(&(&data.endogenous - x_fit), &(&inst.values - v_fit));
    assert!(corr.abs() < 0.05, "partial correlation {corr}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ols_residual_is_orthogonal_to_the_dictionary(seed in 0u64..1_000_000, n in 12usize..60, k in 1usize..8) {
        let mut r = rng(seed);
        let g = normal_mat(&mut r, n, k);
        let x = normal_vec(&mut r, n) + g.column(0) * 0.7;
        let w = weights_ols(&g, &x).unwrap();
        let values = &g * &w.w;
        let resid = &x - &values;
        let nf = n as f64;
        prop_assert!((g.transpose() * &resid).amax() / nf <= 1e-8);
        prop_assert!((x.dot(&values) / nf - values.dot(&values) / nf).abs() <= 1e-8);
    }

    #[test]
    fn relevant_projection_has_matching_covariance(seed in 0u64..1_000_000, n in 12usize..60, k in 1usize..6) {
        let mut r = rng(seed);
        let mut g = normal_mat(&mut r, n, k + 1);
        // quantile dictionaries span the constant through their intercepts
        g.column_mut(0).fill(1.0);
        let x = normal_vec(&mut r, n) + g.column(1) * 0.7;
        let values = &g * weights_ols(&g, &x).unwrap().w;
        let nf = n as f64;
        prop_assume!(values.dot(&values) / nf > 1e-8);
        let xc = x.add_scalar(-linalg::mean(&x));
        let vc = values.add_scalar(-linalg::mean(&values));
        let cov = xc.dot(&vc) / nf;
        prop_assert!(cov >= 0.0);
        prop_assert!((cov - vc.dot(&vc) / nf).abs() <= 1e-8);
    }

    #[test]
    fn ridge_norm_shrinks_with_the_penalty(seed in 0u64..1_000_000, a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let mut r = rng(seed);
        let g = normal_mat(&mut r, 30, 4);
        let x = normal_vec(&mut r, 30);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let w_lo = weights_ridge(&g, &x, lo).unwrap().w.norm();
        let w_hi = weights_ridge(&g, &x, hi).unwrap().w.norm();
        prop_assert!(w_lo >= w_hi - 1e-12);
    }

    #[test]
    fn lasso_solutions_satisfy_kkt(seed in 0u64..1_000_000, frac in 0.01f64..0.99, standardize in any::<bool>()) {
        let mut r = rng(seed);
        let g = normal_mat(&mut r, 40, 6);
        let x = normal_vec(&mut r, 40) + g.column(1) * 1.5;
        let problem = LassoProblem::new(&g, &x, standardize);
        let lambda = problem.lambda_max() * frac;
        let opts = LassoOptions { standardize, ..LassoOptions::default() };
        let sol = problem.solve(lambda, &opts);
        let grad = problem.kkt_gradient(&sol.w);
        for j in 0..6 {
            if sol.w[j] == 0.0 {
                prop_assert!(grad[j].abs() <= lambda + 1e-6);
            } else {
                prop_assert!((grad[j] - lambda * sol.w[j].signum()).abs() <= 1e-6);
            }
        }
    }
}
