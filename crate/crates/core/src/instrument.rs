//! Aggregation of the quantile dictionary into a single generated
//! instrument: equal, least-squares, ridge and LASSO weights, plus
//! cross-validated penalty selection on a training split.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{QlsError, Result};
use crate::linalg::{self, PINV_RCOND};
use crate::quantile::{BasisSpec, FirstStageFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightKind {
    Equal,
    Ols,
    Ridge,
    /// LASSO selection, selected columns weighted equally.
    LassoEqualOnSupport,
    /// LASSO coefficients used as weights.
    LassoCoefficients,
}

impl WeightKind {
    pub fn id(self) -> &'static str {
        match self {
            WeightKind::Equal => "equal",
            WeightKind::Ols => "ols",
            WeightKind::Ridge => "ridge",
            WeightKind::LassoEqualOnSupport => "lasso-equal",
            WeightKind::LassoCoefficients => "lasso-coef",
        }
    }

    pub fn penalty_kind(self) -> Option<PenaltyKind> {
        match self {
            WeightKind::Ridge => Some(PenaltyKind::Ridge),
            WeightKind::LassoEqualOnSupport | WeightKind::LassoCoefficients => {
                Some(PenaltyKind::Lasso)
            }
            _ => None,
        }
    }
}

impl std::str::FromStr for WeightKind {
    type Err = QlsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(WeightKind::Equal),
            "ols" => Ok(WeightKind::Ols),
            "ridge" => Ok(WeightKind::Ridge),
            "lasso-equal" => Ok(WeightKind::LassoEqualOnSupport),
            "lasso-coef" => Ok(WeightKind::LassoCoefficients),
            other => Err(QlsError::Config(format!("unknown weight method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Fixed(f64),
    CrossValidated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Ridge,
    Lasso,
}

/// How rows are divided between penalty selection and final weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitRule {
    /// The first rows in data order select the penalty.
    #[default]
    FirstRows,
    /// A seeded random subset selects the penalty.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightMethod {
    pub kind: WeightKind,
    pub penalty: Penalty,
    pub cv_folds: usize,
    /// Share of rows used to select the penalty.
    pub split_fraction: f64,
    pub split: SplitRule,
    /// Post-LASSO least-squares refit on the selected support
    /// (only for [`WeightKind::LassoCoefficients`]).
    pub refit: bool,
}

impl WeightMethod {
    pub fn new(kind: WeightKind) -> Self {
        let penalty = match kind {
            WeightKind::Equal | WeightKind::Ols => Penalty::Fixed(0.0),
            _ => Penalty::CrossValidated,
        };
        Self {
            kind,
            penalty,
            cv_folds: 10,
            split_fraction: 0.5,
            split: SplitRule::FirstRows,
            refit: false,
        }
    }

    pub fn with_penalty(mut self, penalty: Penalty) -> Self {
        self.penalty = penalty;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentWeights {
    pub kind: WeightKind,
    pub w: DVector<f64>,
    /// Selected columns (LASSO variants only).
    pub support: Option<Vec<usize>>,
    pub penalty: Option<f64>,
    /// Rows used to choose the penalty by cross-validation.
    pub penalty_rows: Option<Vec<usize>>,
    /// Rows used to estimate the final weights.
    pub weight_rows: Vec<usize>,
    /// Numerical rank of the dictionary block the weights were solved on.
    pub rank: usize,
    pub warnings: Vec<String>,
}

/// The generated instrument `dictionary · w` evaluated on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstrument {
    pub values: DVector<f64>,
    pub weights: InstrumentWeights,
    pub basis: BasisSpec,
    pub grid_step: f64,
    pub k: usize,
}

fn check_dims(dictionary: &DMatrix<f64>, x: &DVector<f64>) -> Result<()> {
    if dictionary.nrows() != x.len() {
        return Err(QlsError::Dimension(format!(
            "dictionary has {} rows, endogenous vector has {}",
            dictionary.nrows(),
            x.len()
        )));
    }
    if dictionary.ncols() == 0 {
        return Err(QlsError::DegenerateInstrument("empty dictionary".into()));
    }
    Ok(())
}

/// Minimum-norm least-squares weights, `(G'G)⁻¹G'x` when the Gram matrix is
/// invertible.
pub fn weights_ols(dictionary: &DMatrix<f64>, x: &DVector<f64>) -> Result<InstrumentWeights> {
    check_dims(dictionary, x)?;
    if dictionary.iter().all(|&v| v == 0.0) {
        return Err(QlsError::DegenerateInstrument(
            "dictionary is identically zero, so the projection of X on it is zero".into(),
        ));
    }
    let sol = linalg::min_norm_lstsq(dictionary, x, PINV_RCOND);
    let k = dictionary.ncols();
    let mut warnings = Vec::new();
    if sol.rank < k {
        warnings.push(format!(
            "dictionary has effective rank {} < {k}; minimum-norm weights used",
            sol.rank
        ));
    }
    Ok(InstrumentWeights {
        kind: WeightKind::Ols,
        w: sol.solution,
        support: None,
        penalty: None,
        penalty_rows: None,
        weight_rows: (0..x.len()).collect(),
        rank: sol.rank,
        warnings,
    })
}

/// Ridge weights `(G'G + nλI)⁻¹G'x`.
pub fn weights_ridge(
    dictionary: &DMatrix<f64>,
    x: &DVector<f64>,
    penalty: f64,
) -> Result<InstrumentWeights> {
    check_dims(dictionary, x)?;
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(QlsError::Domain(format!(
            "ridge penalty {penalty} must be a finite nonnegative number"
        )));
    }
    let n = x.len() as f64;
    let k = dictionary.ncols();
    let mut gram = dictionary.transpose() * dictionary;
    for j in 0..k {
        gram[(j, j)] += n * penalty;
    }
    let rhs = dictionary.transpose() * x;
    let (w, rank) = match linalg::spd_solve(&gram, &rhs) {
        Some(w) if w.iter().all(|v| v.is_finite()) => (w, k),
        _ => {
            let sol = linalg::min_norm_lstsq(&gram, &rhs, PINV_RCOND);
            (sol.solution, sol.rank)
        }
    };
    if !w.iter().all(|v| v.is_finite()) {
        return Err(QlsError::Numerical("ridge weights overflowed".into()));
    }
    let mut warnings = Vec::new();
    if rank < k {
        warnings.push(format!(
            "penalised Gram matrix has effective rank {rank} < {k}"
        ));
    }
    Ok(InstrumentWeights {
        kind: WeightKind::Ridge,
        w,
        support: None,
        penalty: Some(penalty),
        penalty_rows: None,
        weight_rows: (0..x.len()).collect(),
        rank,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LassoVariant {
    EqualOnSupport,
    Coefficients,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Center and scale columns to unit standard deviation inside the solver
    /// (with an unpenalised intercept). Weights are returned on the raw scale.
    pub standardize: bool,
    /// Stop when no coordinate moves more than `tol` (relative to `max|G̃'x̃|/n`).
    pub tol: f64,
    /// Allowed violation of the optimality conditions, relative to `1 + λ`.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            standardize: true,
            tol: 1e-12,
            kkt_tol: 1e-9,
            max_sweeps: 20_000,
        }
    }
}

impl LassoOptions {
    /// Looser settings for the many solves of a cross-validation path.
    pub fn path() -> Self {
        Self {
            tol: 1e-8,
            kkt_tol: 1e-6,
            max_sweeps: 2_000,
            ..Self::default()
        }
    }
}

/// Quadratic form of the penalised least-squares objective
/// `(1/n)‖x̃ - G̃w‖² + λ‖w‖₁` on (optionally) standardised columns.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    /// `G̃'G̃/n`
    pub gram: DMatrix<f64>,
    /// `G̃'x̃/n`
    pub corr: DVector<f64>,
    col_mean: DVector<f64>,
    col_scale: DVector<f64>,
    x_mean: f64,
    /// Columns with zero spread are excluded from the fit.
    usable: Vec<bool>,
}

/// Outcome of one coordinate-descent solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    /// Coefficients on the solver's (standardised) scale.
    pub w: DVector<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

impl LassoProblem {
    pub fn new(dictionary: &DMatrix<f64>, x: &DVector<f64>, standardize: bool) -> Self {
        let (n, k) = dictionary.shape();
        let nf = n as f64;
        let mut col_mean = DVector::zeros(k);
        let mut col_scale = DVector::from_element(k, 1.0);
        let mut usable = vec![true; k];
        let x_mean = if standardize { linalg::mean(x) } else { 0.0 };
        let mut g = dictionary.clone();
        if standardize {
            for j in 0..k {
                let col = dictionary.column(j);
                let m = col.sum() / nf;
                let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf).sqrt();
                col_mean[j] = m;
                if sd > 1e-12 * (1.0 + m.abs()) {
                    col_scale[j] = sd;
                } else {
                    usable[j] = false;
                }
                for i in 0..n {
                    g[(i, j)] = if usable[j] {
                        (dictionary[(i, j)] - m) / col_scale[j]
                    } else {
                        0.0
                    };
                }
            }
        } else {
            for j in 0..k {
                if dictionary.column(j).iter().all(|&v| v == 0.0) {
                    usable[j] = false;
                }
            }
        }
        let xc = x.add_scalar(-x_mean);
        Self {
            gram: g.transpose() * &g / nf,
            corr: g.transpose() * xc / nf,
            col_mean,
            col_scale,
            x_mean,
            usable,
        }
    }

    pub fn k(&self) -> usize {
        self.corr.len()
    }

    /// Smallest penalty with an empty solution, `max_k 2|G̃_k'x̃|/n`.
    pub fn lambda_max(&self) -> f64 {
        (0..self.k())
            .filter(|&j| self.usable[j])
            .map(|j| 2.0 * self.corr[j].abs())
            .fold(0.0, f64::max)
    }

    /// `2 (G̃'x̃/n - G̃'G̃ w/n)`, the negative gradient of the smooth part.
    pub fn kkt_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.corr - &self.gram * w) * 2.0
    }

    /// Raw-scale weights and intercept for solver coefficients.
    pub fn to_raw(&self, w: &DVector<f64>) -> (DVector<f64>, f64) {
        let raw = w.component_div(&self.col_scale);
        let intercept = self.x_mean - raw.dot(&self.col_mean);
        (raw, intercept)
    }

    /// Exact solution path by the LARS-LASSO homotopy, from `λ_max` down to
    /// `lambda_end`. The path stops early (and is marked incomplete) if a
    /// joining column makes the active Gram block singular.
    pub fn path(&self, lambda_end: f64) -> LassoPath {
        let k = self.k();
        let mu_end = (lambda_end / 2.0).max(0.0);
        let mut w = DVector::zeros(k);
        let mut c = self.corr.clone();
        let mut mu = self.lambda_max() / 2.0;
        let mut knots = vec![(2.0 * mu, w.clone())];
        if mu <= mu_end || mu == 0.0 {
            return LassoPath {
                knots,
                complete: true,
            };
        }
        let mut active: Vec<usize> = Vec::new();
        let mut in_active = vec![false; k];
        let mut just_dropped: Option<usize> = None;
        let tie = 1e-10;
        for _ in 0..(8 * k + 16) {
            // admit every column at (or numerically past) the boundary
            for j in 0..k {
                if self.usable[j]
                    && !in_active[j]
                    && Some(j) != just_dropped
                    && c[j].abs() >= mu * (1.0 - tie)
                {
                    active.push(j);
                    in_active[j] = true;
                }
            }
            if mu <= mu_end * (1.0 + 1e-14) {
                return LassoPath {
                    knots,
                    complete: true,
                };
            }
            let s = active.len();
            let signs = DVector::from_fn(s, |a, _| {
                let j = active[a];
                if w[j] != 0.0 {
                    w[j].signum()
                } else {
                    c[j].signum()
                }
            });
            let caa = DMatrix::from_fn(s, s, |a, b| self.gram[(active[a], active[b])]);
            let Some(chol) = caa.cholesky() else {
                return LassoPath {
                    knots,
                    complete: false,
                };
            };
            let d = chol.solve(&signs);
            if !d.iter().all(|v| v.is_finite()) {
                return LassoPath {
                    knots,
                    complete: false,
                };
            }
            let mut a_vec = DVector::zeros(k);
            for (idx, &j) in active.iter().enumerate() {
                a_vec.axpy(d[idx], &self.gram.column(j), 1.0);
            }
            let mut step = mu - mu_end;
            let mut join: Option<usize> = None;
            let mut drop: Option<usize> = None;
            for j in 0..k {
                if !self.usable[j] || in_active[j] || Some(j) == just_dropped {
                    continue;
                }
                for (num, den) in [(mu - c[j], 1.0 - a_vec[j]), (mu + c[j], 1.0 + a_vec[j])] {
                    if den > 1e-12 {
                        let t = num / den;
                        if t >= 0.0 && t < step {
                            step = t;
                            join = Some(j);
                            drop = None;
                        }
                    }
                }
            }
            for (idx, &j) in active.iter().enumerate() {
                if d[idx] != 0.0 && w[j] != 0.0 {
                    let t = -w[j] / d[idx];
                    if t > 0.0 && t < step {
                        step = t;
                        drop = Some(j);
                        join = None;
                    }
                }
            }
            for (idx, &j) in active.iter().enumerate() {
                w[j] += step * d[idx];
            }
            mu -= step;
            just_dropped = None;
            if let Some(j) = drop {
                w[j] = 0.0;
                active.retain(|&v| v != j);
                in_active[j] = false;
                just_dropped = Some(j);
            }
            if let Some(j) = join {
                if !in_active[j] {
                    active.push(j);
                    in_active[j] = true;
                }
            }
            c = &self.corr - &self.gram * &w;
            knots.push((2.0 * mu, w.clone()));
        }
        LassoPath {
            knots,
            complete: false,
        }
    }

    /// Solve at one penalty: homotopy start, then coordinate-descent polish.
    pub fn solve(&self, penalty: f64, opts: &LassoOptions) -> LassoSolution {
        let path = self.path(penalty);
        let warm = path
            .at(penalty)
            .unwrap_or_else(|| path.knots.last().expect("path has a knot").1.clone());
        self.coordinate_descent(penalty, &warm, opts)
    }

    /// Coordinate descent with warm start `w`, alternating full sweeps and
    /// sweeps over the active set, and trying an exact solve of the KKT
    /// system on the current support whenever the active set settles.
    pub fn coordinate_descent(
        &self,
        penalty: f64,
        warm: &DVector<f64>,
        opts: &LassoOptions,
    ) -> LassoSolution {
        let k = self.k();
        let half = penalty / 2.0;
        let mut w = warm.clone();
        for j in 0..k {
            if !self.usable[j] {
                w[j] = 0.0;
            }
        }
        let mut q = &self.gram * &w;
        let mut sweeps = 0;

        let update = |j: usize, w: &mut DVector<f64>, q: &mut DVector<f64>| -> f64 {
            let cjj = self.gram[(j, j)];
            if !self.usable[j] || cjj <= 0.0 {
                return 0.0;
            }
            let rho = self.corr[j] - q[j] + cjj * w[j];
            let new = soft_threshold(rho, half) / cjj;
            let delta = new - w[j];
            if delta != 0.0 {
                w[j] = new;
                q.axpy(delta, &self.gram.column(j), 1.0);
            }
            delta.abs() * cjj.sqrt()
        };

        let scale = self.corr.amax().max(1e-300);
        loop {
            // full sweep
            let mut max_delta = 0.0_f64;
            for j in 0..k {
                max_delta = max_delta.max(update(j, &mut w, &mut q));
            }
            sweeps += 1;
            if max_delta <= opts.tol * scale && self.kkt_ok(&w, &q, penalty, opts.kkt_tol) {
                return LassoSolution {
                    w,
                    converged: true,
                    sweeps,
                };
            }
            // active set iterations
            let mut inner = 0;
            loop {
                let active: Vec<usize> = (0..k).filter(|&j| w[j] != 0.0).collect();
                let mut max_delta = 0.0_f64;
                for &j in &active {
                    max_delta = max_delta.max(update(j, &mut w, &mut q));
                }
                sweeps += 1;
                inner += 1;
                if inner % 8 == 0 {
                    if let Some(exact) = self.exact_on_support(&w, penalty) {
                        w = exact;
                        q = &self.gram * &w;
                        if self.kkt_ok(&w, &q, penalty, opts.kkt_tol) {
                            return LassoSolution {
                                w,
                                converged: true,
                                sweeps,
                            };
                        }
                        break;
                    }
                }
                if max_delta <= opts.tol * scale || sweeps >= opts.max_sweeps {
                    break;
                }
            }
            if sweeps >= opts.max_sweeps {
                let converged = self.kkt_ok(&w, &q, penalty, opts.kkt_tol.max(1e-6));
                return LassoSolution {
                    w,
                    converged,
                    sweeps,
                };
            }
        }
    }

    fn kkt_ok(&self, w: &DVector<f64>, q: &DVector<f64>, penalty: f64, tol: f64) -> bool {
        let slack = tol * (1.0 + penalty) + 1e-12 * self.corr.amax();
        (0..self.k()).filter(|&j| self.usable[j]).all(|j| {
            let g = 2.0 * (self.corr[j] - q[j]);
            if w[j] == 0.0 {
                g.abs() <= penalty + slack
            } else {
                (g - penalty * w[j].signum()).abs() <= slack
            }
        })
    }

    /// Solve `C_SS w_S = b_S - (λ/2) sign(w_S)` on the current support and
    /// keep it only when the signs are consistent.
    fn exact_on_support(&self, w: &DVector<f64>, penalty: f64) -> Option<DVector<f64>> {
        let support: Vec<usize> = (0..self.k()).filter(|&j| w[j] != 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let s = support.len();
        let css = DMatrix::from_fn(s, s, |a, b| self.gram[(support[a], support[b])]);
        let rhs = DVector::from_fn(s, |a, _| {
            self.corr[support[a]] - 0.5 * penalty * w[support[a]].signum()
        });
        let sol = css.clone().cholesky()?.solve(&rhs);
        // reject ill-conditioned supports
        let resid = &css * &sol - &rhs;
        if resid.amax() > 1e-10 * (1.0 + rhs.amax()) {
            return None;
        }
        let mut out = DVector::zeros(self.k());
        for (a, &j) in support.iter().enumerate() {
            if sol[a].signum() != w[j].signum() || sol[a] == 0.0 {
                return None;
            }
            out[j] = sol[a];
        }
        Some(out)
    }
}

/// Piecewise-linear LASSO solution path; knots are in decreasing penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    pub knots: Vec<(f64, DVector<f64>)>,
    /// Whether the path reached the requested end penalty.
    pub complete: bool,
}

impl LassoPath {
    /// Solution at `penalty` by interpolation between knots; `None` below
    /// the end of an incomplete path.
    pub fn at(&self, penalty: f64) -> Option<DVector<f64>> {
        let (first_l, first_w) = &self.knots[0];
        if penalty >= *first_l {
            return Some(DVector::zeros(first_w.len()));
        }
        for pair in self.knots.windows(2) {
            let (l0, w0) = &pair[0];
            let (l1, w1) = &pair[1];
            if penalty <= *l0 && penalty >= *l1 {
                if l0 == l1 {
                    return Some(w1.clone());
                }
                let t = (l0 - penalty) / (l0 - l1);
                return Some(w0 + (w1 - w0) * t);
            }
        }
        let (_, last) = self.knots.last().expect("path has a knot");
        self.complete.then(|| last.clone())
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// LASSO weights. `EqualOnSupport` replaces the nonzero coefficients by
/// `1/|support|`; `refit` re-estimates `Coefficients` by least squares on
/// the support.
pub fn weights_lasso(
    dictionary: &DMatrix<f64>,
    x: &DVector<f64>,
    penalty: f64,
    variant: LassoVariant,
    refit: bool,
) -> Result<InstrumentWeights> {
    weights_lasso_with(
        dictionary,
        x,
        penalty,
        variant,
        refit,
        &LassoOptions::default(),
    )
}

pub fn weights_lasso_with(
    dictionary: &DMatrix<f64>,
    x: &DVector<f64>,
    penalty: f64,
    variant: LassoVariant,
    refit: bool,
    opts: &LassoOptions,
) -> Result<InstrumentWeights> {
    check_dims(dictionary, x)?;
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(QlsError::Domain(format!(
            "LASSO penalty {penalty} must be a finite nonnegative number"
        )));
    }
    let k = dictionary.ncols();
    let problem = LassoProblem::new(dictionary, x, opts.standardize);
    let sol = problem.solve(penalty, opts);
    let (raw, _) = problem.to_raw(&sol.w);
    let support: Vec<usize> = (0..k).filter(|&j| sol.w[j] != 0.0).collect();
    if support.is_empty() {
        return Err(QlsError::DegenerateInstrument(format!(
            "LASSO support is empty at penalty {penalty:.6e} (lambda_max {:.6e})",
            problem.lambda_max()
        )));
    }
    let mut warnings = Vec::new();
    if !sol.converged {
        warnings.push(format!(
            "coordinate descent stopped after {} sweeps without meeting KKT tolerance",
            sol.sweeps
        ));
    }
    let (w, kind, rank) = match variant {
        LassoVariant::EqualOnSupport => {
            let mut w = DVector::zeros(k);
            let share = 1.0 / support.len() as f64;
            for &j in &support {
                w[j] = share;
            }
            (w, WeightKind::LassoEqualOnSupport, support.len())
        }
        LassoVariant::Coefficients if refit => {
            let sub = linalg::select_columns(dictionary, &support);
            let sol = linalg::min_norm_lstsq(&sub, x, PINV_RCOND);
            let mut w = DVector::zeros(k);
            for (a, &j) in support.iter().enumerate() {
                w[j] = sol.solution[a];
            }
            (w, WeightKind::LassoCoefficients, sol.rank)
        }
        LassoVariant::Coefficients => (raw, WeightKind::LassoCoefficients, support.len()),
    };
    Ok(InstrumentWeights {
        kind,
        w,
        support: Some(support),
        penalty: Some(penalty),
        penalty_rows: None,
        weight_rows: (0..x.len()).collect(),
        rank,
        warnings,
    })
}

/// Fold id for every row: a seeded permutation dealt round-robin into
/// `folds` groups.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut fold = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        fold[row] = pos % folds;
    }
    fold
}

/// Mean out-of-fold squared prediction error of `x` for each candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CvCurve {
    pub candidates: Vec<f64>,
    pub mse: Vec<f64>,
}

impl CvCurve {
    /// Candidate with the smallest error; ties go to the earliest candidate.
    pub fn best(&self) -> f64 {
        let mut best = 0;
        for (i, &m) in self.mse.iter().enumerate() {
            if m < self.mse[best] {
                best = i;
            }
        }
        self.candidates[best]
    }
}

pub fn cv_curve(
    dictionary: &DMatrix<f64>,
    x: &DVector<f64>,
    folds: usize,
    candidates: &[f64],
    seed: u64,
    kind: PenaltyKind,
) -> Result<CvCurve> {
    check_dims(dictionary, x)?;
    let n = x.len();
    if folds < 2 {
        return Err(QlsError::Config(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if n < folds {
        return Err(QlsError::Config(format!(
            "{n} training rows cannot be split into {folds} folds"
        )));
    }
    if candidates.is_empty() {
        return Err(QlsError::Config("empty penalty candidate grid".into()));
    }
    if candidates.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(QlsError::Config(
            "penalty candidates must be finite and nonnegative".into(),
        ));
    }
    let assignment = fold_assignment(n, folds, seed);
    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
            let val: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
            let g_tr = linalg::select_rows(dictionary, &train);
            let x_tr = linalg::select_rows_vec(x, &train);
            let g_va = linalg::select_rows(dictionary, &val);
            let x_va = linalg::select_rows_vec(x, &val);
            match kind {
                PenaltyKind::Ridge => ridge_fold_errors(&g_tr, &x_tr, &g_va, &x_va, candidates),
                PenaltyKind::Lasso => lasso_fold_errors(&g_tr, &x_tr, &g_va, &x_va, candidates),
            }
        })
        .collect();
    // fixed summation order over folds keeps the curve deterministic
    let mut sse = vec![0.0; candidates.len()];
    for errors in per_fold {
        for (s, e) in sse.iter_mut().zip(errors) {
            *s += e;
        }
    }
    Ok(CvCurve {
        candidates: candidates.to_vec(),
        mse: sse.into_iter().map(|s| s / n as f64).collect(),
    })
}

/// Penalty minimising the cross-validated prediction error of `x`.
pub fn select_penalty_cv(
    dictionary: &DMatrix<f64>,
    x: &DVector<f64>,
    folds: usize,
    candidates: &[f64],
    seed: u64,
    kind: PenaltyKind,
) -> Result<f64> {
    Ok(cv_curve(dictionary, x, folds, candidates, seed, kind)?.best())
}

fn ridge_fold_errors(
    g_tr: &DMatrix<f64>,
    x_tr: &DVector<f64>,
    g_va: &DMatrix<f64>,
    x_va: &DVector<f64>,
    candidates: &[f64],
) -> Vec<f64> {
    let n_tr = x_tr.len() as f64;
    let eig = (g_tr.transpose() * g_tr).symmetric_eigen();
    let proj = eig.eigenvectors.transpose() * (g_tr.transpose() * x_tr);
    let emax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let gv = g_va * &eig.eigenvectors;
    candidates
        .iter()
        .map(|&lambda| {
            let coef = DVector::from_fn(proj.len(), |j, _| {
                let d = eig.eigenvalues[j].max(0.0) + n_tr * lambda;
                if d > PINV_RCOND * emax && d > 0.0 {
                    proj[j] / d
                } else {
                    0.0
                }
            });
            (x_va - &gv * coef).norm_squared()
        })
        .collect()
}

fn lasso_fold_errors(
    g_tr: &DMatrix<f64>,
    x_tr: &DVector<f64>,
    g_va: &DMatrix<f64>,
    x_va: &DVector<f64>,
    candidates: &[f64],
) -> Vec<f64> {
    let opts = LassoOptions::path();
    let problem = LassoProblem::new(g_tr, x_tr, opts.standardize);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].total_cmp(&candidates[a]).then(a.cmp(&b)));
    let smallest = candidates.iter().cloned().fold(f64::INFINITY, f64::min);
    let path = problem.path(smallest);
    let mut warm = path.knots.last().expect("path has a knot").1.clone();
    let mut errors = vec![0.0; candidates.len()];
    for idx in order {
        let w = match path.at(candidates[idx]) {
            Some(w) => w,
            None => {
                // below the end of an incomplete path
                let sol = problem.coordinate_descent(candidates[idx], &warm, &opts);
                warm = sol.w.clone();
                sol.w
            }
        };
        let (raw, intercept) = problem.to_raw(&w);
        let pred = (g_va * &raw).add_scalar(intercept);
        errors[idx] = (x_va - pred).norm_squared();
    }
    errors
}

fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Default candidate grid: 50 log-spaced points, over
/// `[1e-5 λ_max, λ_max]` for the LASSO and `[1e-4, 1e2] × mean(G_k'G_k/n)`
/// for ridge.
pub fn default_penalty_grid(
    dictionary: &DMatrix<f64>,
    x: &DVector<f64>,
    kind: PenaltyKind,
) -> Vec<f64> {
    match kind {
        PenaltyKind::Lasso => {
            let lmax =
                LassoProblem::new(dictionary, x, LassoOptions::default().standardize).lambda_max();
            if lmax > 0.0 {
                log_spaced(1e-5 * lmax, lmax, 50)
            } else {
                vec![0.0]
            }
        }
        PenaltyKind::Ridge => {
            let n = dictionary.nrows() as f64;
            let scale = dictionary
                .column_iter()
                .map(|c| c.norm_squared() / n)
                .sum::<f64>()
                / dictionary.ncols().max(1) as f64;
            let scale = if scale > 0.0 { scale } else { 1.0 };
            log_spaced(1e-4 * scale, 1e2 * scale, 50)
        }
    }
}

/// Turn a first-stage fit into the generated instrument.
///
/// Cross-validated ridge/LASSO methods choose the penalty on the first
/// `⌈split_fraction · n⌉` rows and estimate the final weights on the
/// remaining rows; every other method uses all rows. The instrument is
/// evaluated on all rows.
pub fn build_instrument(
    fit: &FirstStageFit,
    x: &DVector<f64>,
    method: &WeightMethod,
    seed: u64,
) -> Result<GeneratedInstrument> {
    let penalty = match (method.kind.penalty_kind(), method.penalty) {
        (Some(_), Penalty::CrossValidated) => {
            Some(select_split_penalty(&fit.dictionary, x, method, seed)?)
        }
        _ => None,
    };
    build_instrument_with_penalty(fit, x, method, penalty)
}

fn training_split(n: usize, method: &WeightMethod) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(method.split_fraction > 0.0 && method.split_fraction < 1.0) {
        return Err(QlsError::Config(format!(
            "split fraction {} must lie in (0, 1)",
            method.split_fraction
        )));
    }
    let n_train = ((method.split_fraction * n as f64).ceil() as usize).min(n);
    if n_train >= n {
        return Err(QlsError::Config(
            "sample split leaves no rows for the final weights".into(),
        ));
    }
    Ok(split_rows(n, n_train, method.split))
}

/// Cross-validated penalty chosen on the training part of the split.
pub fn select_split_penalty(
    dictionary: &DMatrix<f64>,
    x: &DVector<f64>,
    method: &WeightMethod,
    seed: u64,
) -> Result<f64> {
    check_dims(dictionary, x)?;
    let kind = method.kind.penalty_kind().ok_or_else(|| {
        QlsError::Config(format!(
            "weight method '{}' has no penalty",
            method.kind.id()
        ))
    })?;
    let (train, _) = training_split(x.len(), method)?;
    let g_tr = linalg::select_rows(dictionary, &train);
    let x_tr = linalg::select_rows_vec(x, &train);
    let candidates = default_penalty_grid(&g_tr, &x_tr, kind);
    select_penalty_cv(&g_tr, &x_tr, method.cv_folds, &candidates, seed, kind)
}

/// Like [`build_instrument`], with the cross-validated penalty supplied by
/// the caller (ignored for unpenalised methods).
pub fn build_instrument_with_penalty(
    fit: &FirstStageFit,
    x: &DVector<f64>,
    method: &WeightMethod,
    selected: Option<f64>,
) -> Result<GeneratedInstrument> {
    let g = &fit.dictionary;
    check_dims(g, x)?;
    let n = x.len();
    let k = g.ncols();
    let weights = match (method.kind, method.penalty) {
        (WeightKind::Equal, _) => InstrumentWeights {
            kind: WeightKind::Equal,
            w: DVector::from_element(k, 1.0 / k as f64),
            support: None,
            penalty: None,
            penalty_rows: None,
            weight_rows: (0..n).collect(),
            rank: k,
            warnings: Vec::new(),
        },
        (WeightKind::Ols, _) => weights_ols(g, x)?,
        (kind, Penalty::Fixed(lambda)) => penalised_weights(kind, g, x, lambda, method.refit)?,
        (kind, Penalty::CrossValidated) => {
            let lambda = selected.ok_or_else(|| {
                QlsError::Config("cross-validated method needs a selected penalty".into())
            })?;
            let (train, hold) = training_split(n, method)?;
            let g_ho = linalg::select_rows(g, &hold);
            let x_ho = linalg::select_rows_vec(x, &hold);
            let mut w = penalised_weights(kind, &g_ho, &x_ho, lambda, method.refit)?;
            w.penalty_rows = Some(train);
            w.weight_rows = hold;
            w
        }
    };
    Ok(GeneratedInstrument {
        values: g * &weights.w,
        weights,
        basis: fit.basis.spec,
        grid_step: fit.grid.step(),
        k,
    })
}

/// Row indices (sorted) for penalty selection and for the final weights.
pub fn split_rows(n: usize, n_train: usize, rule: SplitRule) -> (Vec<usize>, Vec<usize>) {
    match rule {
        SplitRule::FirstRows => ((0..n_train).collect(), (n_train..n).collect()),
        SplitRule::Random { seed } => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut train = perm[..n_train].to_vec();
            let mut hold = perm[n_train..].to_vec();
            train.sort_unstable();
            hold.sort_unstable();
            (train, hold)
        }
    }
}

fn penalised_weights(
    kind: WeightKind,
    g: &DMatrix<f64>,
    x: &DVector<f64>,
    lambda: f64,
    refit: bool,
) -> Result<InstrumentWeights> {
    match kind {
        WeightKind::Ridge => weights_ridge(g, x, lambda),
        WeightKind::LassoEqualOnSupport => {
            weights_lasso(g, x, lambda, LassoVariant::EqualOnSupport, false)
        }
        WeightKind::LassoCoefficients => {
            weights_lasso(g, x, lambda, LassoVariant::Coefficients, refit)
        }
        WeightKind::Equal | WeightKind::Ols => {
            unreachable!("unpenalised kinds are handled by the caller")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ols_projection_onto_itself() {
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let g = DMatrix::from_column_slice(4, 1, x.as_slice());
        let w = weights_ols(&g, &x).unwrap();
        assert_relative_eq!(w.w[0], 1.0, epsilon = 1e-12);
        assert!((&g * &w.w - &x).amax() < 1e-12);
    }

    #[test]
    fn ols_orthonormal_columns() {
        let g = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let x = DVector::from_vec(vec![3.0, 4.0, 5.0]);
        let w = weights_ols(&g, &x).unwrap();
        assert_relative_eq!(w.w[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(w.w[1], 4.0, epsilon = 1e-12);
        let fitted = &g * &w.w;
        assert_relative_eq!(fitted[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ols_zero_dictionary_is_degenerate() {
        let g = DMatrix::zeros(5, 2);
        let x = DVector::from_element(5, 1.0);
        assert!(matches!(
            weights_ols(&g, &x),
            Err(QlsError::DegenerateInstrument(_))
        ));
    }

    #[test]
    fn ols_rank_deficiency_warns() {
        let g = DMatrix::from_fn(6, 2, |i, _| i as f64 + 1.0);
        let x = DVector::from_fn(6, |i, _| 2.0 * (i as f64 + 1.0));
        let w = weights_ols(&g, &x).unwrap();
        assert_eq!(w.rank, 1);
        assert_eq!(w.warnings.len(), 1);
        // minimum norm splits the weight evenly
        assert_relative_eq!(w.w[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(w.w[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn ridge_huge_penalty_shrinks_to_zero() {
        let g = DMatrix::from_fn(20, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let x = DVector::from_fn(20, |i, _| (i as f64).cos());
        let w = weights_ridge(&g, &x, 1e12).unwrap();
        assert!(w.w.amax() < 1e-6);
        assert!(weights_ridge(&g, &x, -1.0).is_err());
    }

    #[test]
    fn lasso_above_lambda_max_is_empty() {
        let g = DMatrix::from_fn(30, 4, |i, j| ((i * 4 + j) as f64 * 0.31).sin());
        let x = DVector::from_fn(30, |i, _| (i as f64 * 0.2).cos());
        for standardize in [false, true] {
            let opts = LassoOptions {
                standardize,
                ..Default::default()
            };
            let lmax = LassoProblem::new(&g, &x, standardize).lambda_max();
            let err = weights_lasso_with(
                &g,
                &x,
                lmax * 1.001,
                LassoVariant::Coefficients,
                false,
                &opts,
            )
            .unwrap_err();
            assert!(matches!(err, QlsError::DegenerateInstrument(ref m) if m.contains("empty")));
            assert!(weights_lasso_with(
                &g,
                &x,
                lmax * 0.9,
                LassoVariant::Coefficients,
                false,
                &opts
            )
            .is_ok());
        }
        // raw threshold matches max_k |2 G_k'x| / n
        let raw = (0..4)
            .map(|j| (2.0 * g.column(j).dot(&x)).abs() / 30.0)
            .fold(0.0, f64::max);
        assert_relative_eq!(
            LassoProblem::new(&g, &x, false).lambda_max(),
            raw,
            epsilon = 1e-14
        );
    }

    #[test]
    fn lasso_equal_on_support_weights() {
        let g = DMatrix::from_fn(40, 5, |i, j| {
            ((i * 5 + j) as f64 * 0.53).sin() + if j == 2 { 0.1 * i as f64 } else { 0.0 }
        });
        let x = g.column(2) * 2.0 + g.column(0) * 0.3;
        let lmax = LassoProblem::new(&g, &x, true).lambda_max();
        let w = weights_lasso(&g, &x, 0.2 * lmax, LassoVariant::EqualOnSupport, false).unwrap();
        let s = w.support.clone().unwrap();
        assert!(s.contains(&2));
        for j in 0..5 {
            let expected = if s.contains(&j) {
                1.0 / s.len() as f64
            } else {
                0.0
            };
            assert_relative_eq!(w.w[j], expected);
        }
    }

    #[test]
    fn post_lasso_refit_solves_restricted_least_squares() {
        let g = DMatrix::from_fn(50, 4, |i, j| {
            (((i + 1) * (j + 2)) as f64).sqrt().sin() + 0.3 * ((i * i + j) as f64).cos()
        });
        let x = g.column(1) * 1.5 - g.column(3) * 0.7;
        let lmax = LassoProblem::new(&g, &x, false).lambda_max();
        let opts = LassoOptions {
            standardize: false,
            ..Default::default()
        };
        let w = weights_lasso_with(&g, &x, 0.05 * lmax, LassoVariant::Coefficients, true, &opts)
            .unwrap();
        let s = w.support.clone().unwrap();
        assert!(s.contains(&1) && s.contains(&3));
        // exact data: refit recovers the generating weights
        assert_relative_eq!(w.w[1], 1.5, epsilon = 1e-8);
        assert_relative_eq!(w.w[3], -0.7, epsilon = 1e-8);
    }

    #[test]
    fn cv_config_errors() {
        let g = DMatrix::from_element(5, 2, 1.0);
        let x = DVector::from_element(5, 1.0);
        assert!(matches!(
            select_penalty_cv(&g, &x, 10, &[0.1], 1, PenaltyKind::Ridge),
            Err(QlsError::Config(_))
        ));
        assert!(matches!(
            select_penalty_cv(&g, &x, 1, &[0.1], 1, PenaltyKind::Ridge),
            Err(QlsError::Config(_))
        ));
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let a = fold_assignment(23, 5, 99);
        assert_eq!(a, fold_assignment(23, 5, 99));
        for f in 0..5 {
            let c = a.iter().filter(|&&v| v == f).count();
            assert!(c == 4 || c == 5);
        }
        assert_ne!(a, fold_assignment(23, 5, 100));
    }

    fn lasso_objective(p: &LassoProblem, w: &DVector<f64>, lambda: f64) -> f64 {
        (w.transpose() * &p.gram * w)[(0, 0)] - 2.0 * p.corr.dot(w) + lambda * w.abs().sum()
    }

    #[test]
    fn homotopy_path_agrees_with_coordinate_descent() {
        let g = DMatrix::from_fn(40, 6, |i, j| {
            (((i + 3) * (j + 1)) as f64 * 0.37).sin() + 0.05 * (i as f64)
        });
        let x = DVector::from_fn(40, |i, _| (i as f64 * 0.11).cos() + 0.02 * i as f64);
        let p = LassoProblem::new(&g, &x, true);
        let lmax = p.lambda_max();
        let path = p.path(1e-4 * lmax);
        assert!(path.complete);
        for frac in [0.9, 0.5, 0.2, 0.05, 0.01, 1e-3] {
            let lambda = frac * lmax;
            let wp = path.at(lambda).unwrap();
            let cd = p.coordinate_descent(lambda, &DVector::zeros(6), &LassoOptions::default());
            assert!(cd.converged);
            let (a, b) = (
                lasso_objective(&p, &wp, lambda),
                lasso_objective(&p, &cd.w, lambda),
            );
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
        assert_eq!(path.at(2.0 * lmax).unwrap().amax(), 0.0);
    }
}
