//! Small dense linear-algebra helpers shared by the estimators.
//!
//! Everything here works on `nalgebra` dynamic matrices. The systems solved
//! are small (a handful of regressors, at most a few hundred dictionary
//! columns), so clarity wins over blocking or BLAS tricks.

use nalgebra::{DMatrix, DVector};

use crate::error::{QlsError, Result};

/// Relative singular-value cutoff used by the minimum-norm solvers.
pub const PINV_RCOND: f64 = 1e-10;

/// Stack column vectors into an `n × k` matrix.
pub fn hstack(columns: &[&DVector<f64>]) -> DMatrix<f64> {
    let n = columns.first().map_or(0, |c| c.len());
    DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i])
}

/// Concatenate matrices with equal row counts side by side.
pub fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let k: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, k);
    let mut offset = 0;
    for b in blocks {
        out.view_mut((0, offset), (n, b.ncols())).copy_from(*b);
        offset += b.ncols();
    }
    out
}

/// Select a subset of rows.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_rows_vec(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

/// Select a subset of columns.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

/// Solve a symmetric positive-definite system, `None` if the Cholesky
/// factorisation fails.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// Inverse of a symmetric positive-definite matrix; falls back to the
/// Moore–Penrose inverse when Cholesky fails.
pub fn spd_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(c) => symmetrize(&c.inverse()),
        None => symmetrize(&pinv(a, PINV_RCOND).0),
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Moore–Penrose inverse with a relative singular-value cutoff. Returns the
/// inverse and the numerical rank.
pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rcond * smax;
    let mut inv = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            let vk = vt.row(k).transpose();
            let uk = u.column(k);
            inv += (vk / s) * uk.transpose();
        }
    }
    (inv, rank)
}

/// Minimum-norm least-squares solution of `a w ≈ b`.
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub solution: DVector<f64>,
    pub rank: usize,
    pub singular_values: DVector<f64>,
}

pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> MinNormSolution {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rcond * smax;
    let mut w = DVector::zeros(a.ncols());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            let coef = u.column(k).dot(b) / s;
            w += vt.row(k).transpose() * coef;
        }
    }
    MinNormSolution {
        solution: w,
        rank,
        singular_values: svd.singular_values.clone(),
    }
}

/// Ordinary least squares through a Householder QR of the design. Fails on
/// a numerically singular design.
pub fn ols(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if design.nrows() != y.len() {
        return Err(QlsError::Dimension(format!(
            "design has {} rows, response has {}",
            design.nrows(),
            y.len()
        )));
    }
    if design.nrows() < design.ncols() {
        return Err(QlsError::Singular(format!(
            "{} rows cannot identify {} coefficients",
            design.nrows(),
            design.ncols()
        )));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let diag_min = r
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(diag_min > 1e-12 * diag_max) || diag_max == 0.0 {
        return Err(QlsError::Singular(format!(
            "least-squares design is rank deficient (|R| diagonal ratio {:.3e})",
            if diag_max > 0.0 {
                diag_min / diag_max
            } else {
                0.0
            }
        )));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| QlsError::Singular("triangular solve failed".into()))
}

/// Orthogonal projection of `y` onto the column span of `m`, computed with
/// the minimum-norm solver so rank-deficient spans are handled.
pub fn project(m: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, usize) {
    let sol = min_norm_lstsq(m, y, PINV_RCOND);
    (m * &sol.solution, sol.rank)
}

/// Indices of columns that are (numerically) linear combinations of the
/// columns before them, found by modified Gram–Schmidt in natural order.
pub fn dependent_columns(m: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..m.ncols() {
        let col = m.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        // second pass for numerical orthogonality
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= tol * norm0.max(1.0) {
            dependent.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

/// Heteroskedasticity-robust (or cluster-robust) "meat" `Σ_g s_g s_g' / n`
/// where `s_g` sums `row_i(design) * resid_i` within a cluster.
pub fn score_meat(
    design: &DMatrix<f64>,
    resid: &DVector<f64>,
    clusters: Option<&[usize]>,
) -> DMatrix<f64> {
    let (n, k) = design.shape();
    let mut meat = DMatrix::zeros(k, k);
    match clusters {
        None => {
            let mut s = vec![0.0; k];
            for i in 0..n {
                for (a, sa) in s.iter_mut().enumerate() {
                    *sa = design[(i, a)] * resid[i];
                }
                for a in 0..k {
                    for b in a..k {
                        meat[(a, b)] += s[a] * s[b];
                    }
                }
            }
        }
        Some(labels) => {
            let groups = labels.iter().copied().max().map_or(0, |m| m + 1);
            let mut sums = DMatrix::<f64>::zeros(groups, k);
            for i in 0..n {
                let g = labels[i];
                for a in 0..k {
                    sums[(g, a)] += design[(i, a)] * resid[i];
                }
            }
            for g in 0..groups {
                for a in 0..k {
                    let sa = sums[(g, a)];
                    for b in a..k {
                        meat[(a, b)] += sa * sums[(g, b)];
                    }
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            meat[(a, b)] = meat[(b, a)];
        }
    }
    meat / n as f64
}

/// Result of a Wald test `H0: coef[idx] = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    /// Wald statistic divided by its degrees of freedom.
    pub f: f64,
    pub df: usize,
}

/// Wald F statistic for the coefficients in `idx`. A rank-deficient
/// restriction covariance is handled with a pseudo-inverse and the degrees of
/// freedom are reduced to its numerical rank.
pub fn wald_f(coef: &DVector<f64>, vcov: &DMatrix<f64>, idx: &[usize]) -> WaldTest {
    if idx.is_empty() {
        return WaldTest { f: 0.0, df: 0 };
    }
    let b = DVector::from_iterator(idx.len(), idx.iter().map(|&i| coef[i]));
    let v = DMatrix::from_fn(idx.len(), idx.len(), |a, c| vcov[(idx[a], idx[c])]);
    let (vinv, rank) = pinv(&symmetrize(&v), 1e-12);
    if rank == 0 {
        return WaldTest { f: 0.0, df: 0 };
    }
    let stat = (b.transpose() * vinv * &b)[(0, 0)];
    WaldTest {
        f: stat / rank as f64,
        df: rank,
    }
}

pub fn mean(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.sum() / v.len() as f64
    }
}

/// Sample Pearson correlation. Zero when either vector is constant.
pub fn correlation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Population variance (divisor n).
pub fn variance(v: &DVector<f64>) -> f64 {
    let m = mean(v);
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}
