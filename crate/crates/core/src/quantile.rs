//! First-stage linear quantile regressions and the dictionary of fitted
//! conditional quantiles.
//!
//! The check-loss minimisation is solved as a bounded linear program with a
//! Mehrotra predictor–corrector primal–dual interior point method (the
//! Frisch–Newton approach), followed by a vertex polish: the `p` observations
//! with the smallest residuals are interpolated exactly and the vertex is kept
//! when its objective is no worse.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{QlsError, Result};
use crate::linalg;

/// Asymmetric absolute loss `u (tau - 1{u < 0})`.
pub fn check_loss(u: f64, tau: f64) -> Result<f64> {
    validate_tau(tau)?;
    Ok(rho(u, tau))
}

#[inline]
fn rho(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(QlsError::Domain(format!(
            "quantile index {tau} is outside (0, 1)"
        )))
    }
}

/// Empirical check-loss objective `Σ ρ_τ(x_i - design_i'coef)`.
pub fn check_objective(
    design: &DMatrix<f64>,
    x: &DVector<f64>,
    coef: &DVector<f64>,
    tau: f64,
) -> f64 {
    let fitted = design * coef;
    x.iter()
        .zip(fitted.iter())
        .map(|(xi, fi)| rho(xi - fi, tau))
        .sum()
}

/// Evenly spaced, trimmed quantile indices `tau_min, tau_min + step, …`
/// up to `1 - tau_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    tau_min: f64,
    step: f64,
    taus: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(tau_min: f64, step: f64) -> Result<Self> {
        if !(tau_min > 0.0 && tau_min < 0.5) {
            return Err(QlsError::Config(format!(
                "tau_min {tau_min} must lie in (0, 0.5)"
            )));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(QlsError::Config(format!(
                "grid step {step} must be positive"
            )));
        }
        let upper = 1.0 - tau_min;
        let mut taus = Vec::new();
        for j in 0.. {
            // rounding keeps grids with nested steps exactly nested
            let t = ((tau_min + j as f64 * step) * 1e12).round() / 1e12;
            if t > upper + 1e-12 {
                break;
            }
            taus.push(t);
        }
        Ok(Self {
            tau_min,
            step,
            taus,
        })
    }

    /// Grid with `tau_min = 0.01`.
    pub fn trimmed(step: f64) -> Result<Self> {
        Self::new(0.01, step)
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.taus[0]
    }

    pub fn last(&self) -> f64 {
        *self.taus.last().expect("grid is never empty")
    }
}

/// Polynomial basis of the instruments used in the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisSpec {
    /// `(1, Z₁, Z₂)`
    Linear,
    /// `(1, Z₁, Z₂, Z₁², Z₂², Z₁Z₂)`
    QuadraticFull,
    /// Quadratic basis without the squares of the excluded instruments.
    QuadraticNoInstrumentSquares,
}

impl BasisSpec {
    pub fn id(self) -> &'static str {
        match self {
            BasisSpec::Linear => "linear",
            BasisSpec::QuadraticFull => "quadratic-full",
            BasisSpec::QuadraticNoInstrumentSquares => "quadratic-no-Z2sq",
        }
    }
}

/// A materialised basis matrix with column metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentBasis {
    pub spec: BasisSpec,
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Columns that involve at least one excluded instrument.
    pub instrument_columns: Vec<usize>,
}

impl InstrumentBasis {
    /// Build the basis from the controls and excluded instruments of `data`.
    ///
    /// Columns come in the order: intercept, controls, instruments, squares
    /// (controls then instruments), then pairwise products in variable order.
    pub fn build(spec: BasisSpec, data: &Dataset) -> Result<Self> {
        let n = data.len();
        let mut vars: Vec<(String, DVector<f64>, bool)> = Vec::new();
        for (j, name) in data.control_names.iter().enumerate() {
            vars.push((name.clone(), data.controls.column(j).into_owned(), false));
        }
        for (j, name) in data.instrument_names.iter().enumerate() {
            vars.push((name.clone(), data.instruments.column(j).into_owned(), true));
        }

        let mut cols: Vec<DVector<f64>> = vec![linalg::ones(n)];
        let mut labels = vec!["(intercept)".to_string()];
        let mut inst = Vec::new();
        for (name, v, is_inst) in &vars {
            if *is_inst {
                inst.push(cols.len());
            }
            cols.push(v.clone());
            labels.push(name.clone());
        }
        if spec != BasisSpec::Linear {
            for (name, v, is_inst) in &vars {
                if *is_inst && spec == BasisSpec::QuadraticNoInstrumentSquares {
                    continue;
                }
                if *is_inst && spec == BasisSpec::QuadraticFull && is_binary(v) {
                    return Err(QlsError::Singular(format!(
                        "instrument '{name}' is binary, so its square duplicates it; \
                         use the quadratic-no-Z2sq basis"
                    )));
                }
                if *is_inst {
                    inst.push(cols.len());
                }
                cols.push(v.component_mul(v));
                labels.push(format!("{name}^2"));
            }
            for a in 0..vars.len() {
                for b in (a + 1)..vars.len() {
                    if vars[a].2 || vars[b].2 {
                        inst.push(cols.len());
                    }
                    cols.push(vars[a].1.component_mul(&vars[b].1));
                    labels.push(format!("{}*{}", vars[a].0, vars[b].0));
                }
            }
        }
        let refs: Vec<&DVector<f64>> = cols.iter().collect();
        Ok(Self {
            spec,
            matrix: linalg::hstack(&refs),
            labels,
            instrument_columns: inst,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

fn is_binary(v: &DVector<f64>) -> bool {
    v.iter().all(|&x| x == 0.0 || x == 1.0)
}

/// Interior point settings. `tol` bounds the duality gap relative to the
/// objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFit {
    pub coefficients: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Final relative duality gap of the interior point iterations.
    pub gap: f64,
    /// Whether the returned coefficients come from the exact vertex polish.
    pub polished: bool,
}

/// Minimise `Σ ρ_τ(x_i - design_i'π)` over `π`.
pub fn fit_quantile(
    design: &DMatrix<f64>,
    x: &DVector<f64>,
    tau: f64,
    opts: &SolverOptions,
) -> Result<QuantileFit> {
    let labels: Vec<String> = (0..design.ncols()).map(|j| format!("column {j}")).collect();
    validate_problem(design, x, tau, &labels)?;
    solve_quantile(design, x, tau, opts)
}

fn validate_problem(
    design: &DMatrix<f64>,
    x: &DVector<f64>,
    tau: f64,
    labels: &[String],
) -> Result<()> {
    validate_tau(tau)?;
    let (n, p) = design.shape();
    if x.len() != n {
        return Err(QlsError::Dimension(format!(
            "design has {n} rows, response has {}",
            x.len()
        )));
    }
    if n < p {
        return Err(QlsError::Dimension(format!(
            "{n} rows cannot identify {p} coefficients"
        )));
    }
    if design.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(QlsError::Domain(
            "non-finite value in quantile regression data".into(),
        ));
    }
    let dep = linalg::dependent_columns(design, 1e-10);
    if !dep.is_empty() {
        return Err(QlsError::RankDeficient {
            columns: dep.into_iter().map(|j| labels[j].clone()).collect(),
        });
    }
    Ok(())
}

/// `D' v`
fn dt_mul(d: &[f64], n: usize, p: usize, v: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        p,
        (0..p).map(|a| {
            let col = &d[a * n..(a + 1) * n];
            col.iter().zip(v).map(|(c, vi)| c * vi).sum()
        }),
    )
}

/// `D y`
fn d_mul(d: &[f64], n: usize, p: usize, y: &DVector<f64>, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for a in 0..p {
        let ya = y[a];
        let col = &d[a * n..(a + 1) * n];
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * ya;
        }
    }
}

/// `D' diag(theta) D`
fn weighted_gram(d: &[f64], n: usize, p: usize, theta: &[f64]) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(p, p);
    let mut tmp = vec![0.0; n];
    for a in 0..p {
        let ca = &d[a * n..(a + 1) * n];
        for i in 0..n {
            tmp[i] = ca[i] * theta[i];
        }
        for b in a..p {
            let cb = &d[b * n..(b + 1) * n];
            let s: f64 = tmp.iter().zip(cb).map(|(t, c)| t * c).sum();
            g[(a, b)] = s;
            g[(b, a)] = s;
        }
    }
    g
}

fn solve_normal(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if let Some(s) = linalg::spd_solve(m, rhs) {
        if s.iter().all(|v| v.is_finite()) {
            return s;
        }
    }
    linalg::min_norm_lstsq(m, rhs, 1e-14).solution
}

fn max_step(v: &[f64], dv: &[f64], sign: f64) -> f64 {
    let mut a = f64::INFINITY;
    for (vi, dvi) in v.iter().zip(dv) {
        let d = sign * dvi;
        if d < 0.0 {
            a = a.min(-vi / d);
        }
    }
    a
}

fn solve_quantile(
    design: &DMatrix<f64>,
    x_raw: &DVector<f64>,
    tau: f64,
    opts: &SolverOptions,
) -> Result<QuantileFit> {
    let (n, p) = design.shape();
    let scale = (x_raw.norm_squared() / n as f64).sqrt();
    if scale == 0.0 {
        return Ok(QuantileFit {
            coefficients: DVector::zeros(p),
            objective: 0.0,
            iterations: 0,
            gap: 0.0,
            polished: false,
        });
    }
    let x: Vec<f64> = x_raw.iter().map(|v| v / scale).collect();
    let d = design.as_slice();

    // Bounded LP: min c'a s.t. D'a = b, 0 <= a <= 1, with c = -x.
    let c: Vec<f64> = x.iter().map(|v| -v).collect();
    let b = dt_mul(d, n, p, &vec![1.0 - tau; n]);
    let mut xp = vec![1.0 - tau; n];
    let mut sp = vec![tau; n];

    let gram = weighted_gram(d, n, p, &vec![1.0; n]);
    let mut y = solve_normal(&gram, &dt_mul(d, n, p, &c));
    let mut dy_buf = vec![0.0; n];
    d_mul(d, n, p, &y, &mut dy_buf);
    let r0: Vec<f64> = c.iter().zip(&dy_buf).map(|(ci, di)| ci - di).collect();
    let delta = 0.5 * r0.iter().map(|v| v.abs()).sum::<f64>() / n as f64 + 0.1;
    let mut z: Vec<f64> = r0.iter().map(|&r| r.max(0.0) + delta).collect();
    let mut w: Vec<f64> = r0.iter().map(|&r| (-r).max(0.0) + delta).collect();

    let mut theta = vec![0.0; n];
    let mut rho_v = vec![0.0; n];
    let mut rd = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut dxa = vec![0.0; n];
    let mut dza = vec![0.0; n];
    let mut dwa = vec![0.0; n];
    let mut t1 = vec![0.0; n];
    let mut t2 = vec![0.0; n];

    let mut iterations = 0;
    let mut rel_gap;
    loop {
        d_mul(d, n, p, &y, &mut dy_buf);
        for i in 0..n {
            rd[i] = c[i] - dy_buf[i] - z[i] + w[i];
        }
        let rp = &b - dt_mul(d, n, p, &xp);
        let gap: f64 = (0..n).map(|i| xp[i] * z[i] + sp[i] * w[i]).sum();
        // QR objective at beta = -y
        let obj: f64 = (0..n).map(|i| rho(x[i] + dy_buf[i], tau)).sum();
        rel_gap = gap / (1.0 + obj.abs());
        let rp_inf = rp.amax();
        let rd_inf = rd.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if rel_gap <= opts.tol && rp_inf <= 1e-9 * (1.0 + b.amax()) && rd_inf <= 1e-9 {
            break;
        }
        if iterations >= opts.max_iter {
            let beta: Vec<f64> = y.iter().map(|v| -v * scale).collect();
            return Err(QlsError::NotConverged {
                iterations,
                gap: rel_gap,
                last_iterate: beta,
            });
        }
        iterations += 1;

        for i in 0..n {
            theta[i] = 1.0 / (z[i] / xp[i] + w[i] / sp[i]);
        }
        let normal = weighted_gram(d, n, p, &theta);
        let chol = normal.clone().cholesky();
        let solve = |rhs: &DVector<f64>| -> DVector<f64> {
            match &chol {
                Some(ch) => {
                    let s = ch.solve(rhs);
                    if s.iter().all(|v| v.is_finite()) {
                        s
                    } else {
                        solve_normal(&normal, rhs)
                    }
                }
                None => solve_normal(&normal, rhs),
            }
        };

        // predictor (affine scaling) direction
        for i in 0..n {
            t1[i] = -xp[i] * z[i];
            t2[i] = -sp[i] * w[i];
        }
        newton_direction(
            d,
            n,
            p,
            &theta,
            &rd,
            &rp,
            &xp,
            &sp,
            &z,
            &w,
            &t1,
            &t2,
            &solve,
            &mut rho_v,
            &mut dy_buf,
            &mut dxa,
            &mut dza,
            &mut dwa,
        );
        let ap = (0.99995 * max_step(&xp, &dxa, 1.0).min(max_step(&sp, &dxa, -1.0))).min(1.0);
        let ad = (0.99995 * max_step(&z, &dza, 1.0).min(max_step(&w, &dwa, 1.0))).min(1.0);
        let gap_aff: f64 = (0..n)
            .map(|i| {
                (xp[i] + ap * dxa[i]) * (z[i] + ad * dza[i])
                    + (sp[i] - ap * dxa[i]) * (w[i] + ad * dwa[i])
            })
            .sum();
        let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);
        let mu = sigma * gap / (2.0 * n as f64);

        // corrector
        for i in 0..n {
            t1[i] = mu - xp[i] * z[i] - dxa[i] * dza[i];
            t2[i] = mu - sp[i] * w[i] + dxa[i] * dwa[i];
        }
        let dy = newton_direction(
            d,
            n,
            p,
            &theta,
            &rd,
            &rp,
            &xp,
            &sp,
            &z,
            &w,
            &t1,
            &t2,
            &solve,
            &mut rho_v,
            &mut dy_buf,
            &mut dx,
            &mut dz,
            &mut dw,
        );
        let ap = (0.99995 * max_step(&xp, &dx, 1.0).min(max_step(&sp, &dx, -1.0))).min(1.0);
        let ad = (0.99995 * max_step(&z, &dz, 1.0).min(max_step(&w, &dw, 1.0))).min(1.0);
        for i in 0..n {
            xp[i] += ap * dx[i];
            sp[i] -= ap * dx[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        y += dy * ad;
    }

    let beta_ipm: DVector<f64> = -&y;
    let xs = DVector::from_vec(x);
    let obj_ipm = check_objective(design, &xs, &beta_ipm, tau);
    let (beta, objective, polished) = match polish_vertex(design, &xs, &beta_ipm, tau) {
        Some((bv, ov)) if ov <= obj_ipm + 1e-12 * (1.0 + obj_ipm) => (bv, ov, true),
        _ => (beta_ipm, obj_ipm, false),
    };
    Ok(QuantileFit {
        coefficients: beta * scale,
        objective: objective * scale,
        iterations,
        gap: rel_gap,
        polished,
    })
}

#[allow(clippy::too_many_arguments)]
fn newton_direction<F: Fn(&DVector<f64>) -> DVector<f64>>(
    d: &[f64],
    n: usize,
    p: usize,
    theta: &[f64],
    rd: &[f64],
    rp: &DVector<f64>,
    xp: &[f64],
    sp: &[f64],
    z: &[f64],
    w: &[f64],
    t1: &[f64],
    t2: &[f64],
    solve: &F,
    rho_v: &mut [f64],
    buf: &mut [f64],
    dx: &mut [f64],
    dz: &mut [f64],
    dw: &mut [f64],
) -> DVector<f64> {
    for i in 0..n {
        rho_v[i] = rd[i] - t1[i] / xp[i] + t2[i] / sp[i];
        buf[i] = theta[i] * rho_v[i];
    }
    let rhs = rp + dt_mul(d, n, p, buf);
    let dy = solve(&rhs);
    d_mul(d, n, p, &dy, buf);
    for i in 0..n {
        dx[i] = theta[i] * (buf[i] - rho_v[i]);
        dz[i] = (t1[i] - z[i] * dx[i]) / xp[i];
        dw[i] = (t2[i] + w[i] * dx[i]) / sp[i];
    }
    dy
}

/// Interpolate the `p` observations closest to the fitted hyperplane.
fn polish_vertex(
    design: &DMatrix<f64>,
    x: &DVector<f64>,
    beta: &DVector<f64>,
    tau: f64,
) -> Option<(DVector<f64>, f64)> {
    let (n, p) = design.shape();
    let resid = x - design * beta;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()).then(a.cmp(&b)));
    let basis = &idx[..p];
    let dh = linalg::select_rows(design, basis);
    let xh = linalg::select_rows_vec(x, basis);
    let lu = dh.lu();
    let sol = lu.solve(&xh)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let obj = check_objective(design, x, &sol, tau);
    Some((sol, obj))
}

/// Kernel sandwich covariance of quantile regression coefficients:
/// `τ(1-τ) (D'FD)⁻¹ (D'D) (D'FD)⁻¹` with a Gaussian kernel density estimate
/// of the residual density at zero and the Hall–Sheather bandwidth.
pub fn quantile_vcov(
    design: &DMatrix<f64>,
    resid: &DVector<f64>,
    tau: f64,
) -> Result<DMatrix<f64>> {
    validate_tau(tau)?;
    let n = design.nrows();
    let normal = Normal::standard();
    let z_alpha = normal.inverse_cdf(0.975);
    let q = normal.inverse_cdf(tau);
    let dens = (-0.5 * q * q).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut hn = (n as f64).powf(-1.0 / 3.0)
        * z_alpha.powf(2.0 / 3.0)
        * (1.5 * dens * dens / (2.0 * q * q + 1.0)).powf(1.0 / 3.0);
    hn = hn.min(0.999 * tau.min(1.0 - tau));

    let sd = linalg::variance(resid).sqrt() * (n as f64 / (n as f64 - 1.0).max(1.0)).sqrt();
    let mut sorted: Vec<f64> = resid.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let iqr = empirical_quantile(&sorted, 0.75) - empirical_quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = (normal.inverse_cdf(tau + hn) - normal.inverse_cdf(tau - hn)) * spread;
    if !(h > 0.0) {
        return Err(QlsError::Numerical(
            "zero bandwidth for quantile density estimate".into(),
        ));
    }
    let f: Vec<f64> = resid
        .iter()
        .map(|r| {
            let u = r / h;
            (-0.5 * u * u).exp() / ((2.0 * std::f64::consts::PI).sqrt() * h)
        })
        .collect();
    let d = design.as_slice();
    let p = design.ncols();
    let j = weighted_gram(d, n, p, &f);
    let hmat = weighted_gram(d, n, p, &vec![1.0; n]);
    let jinv = linalg::spd_inverse(&j);
    Ok(linalg::symmetrize(
        &(&jinv * hmat * &jinv * (tau * (1.0 - tau))),
    ))
}

/// Linear-interpolation sample quantile of sorted data.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-quantile convergence summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub tau: f64,
    pub iterations: usize,
    pub gap: f64,
    pub objective: f64,
    pub polished: bool,
}

/// Quantile regressions over a grid plus the `n × K` dictionary of fitted
/// quantiles, column `k` being `basis · coefficients[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStageFit {
    pub grid: QuantileGrid,
    pub basis: InstrumentBasis,
    pub coefficients: Vec<DVector<f64>>,
    pub dictionary: DMatrix<f64>,
    pub reports: Vec<SolveReport>,
    /// Rows whose fitted quantiles decrease somewhere along the grid.
    pub crossing_rows: usize,
}

impl FirstStageFit {
    pub fn k(&self) -> usize {
        self.grid.len()
    }
}

/// Fit one quantile regression of the endogenous variable on the basis per
/// grid point. Fits run in parallel; results keep grid order.
pub fn fit_first_stage(
    data: &Dataset,
    basis: BasisSpec,
    grid: &QuantileGrid,
    opts: &SolverOptions,
) -> Result<FirstStageFit> {
    let basis = InstrumentBasis::build(basis, data)?;
    fit_first_stage_with_basis(data, basis, grid, opts)
}

pub fn fit_first_stage_with_basis(
    data: &Dataset,
    basis: InstrumentBasis,
    grid: &QuantileGrid,
    opts: &SolverOptions,
) -> Result<FirstStageFit> {
    let n = data.len();
    if n < basis.dim() + 1 {
        return Err(QlsError::Dimension(format!(
            "{n} rows are too few for a {}-column quantile basis",
            basis.dim()
        )));
    }
    validate_problem(&basis.matrix, &data.endogenous, grid.first(), &basis.labels)?;

    let fits: Vec<Result<QuantileFit>> = grid
        .taus()
        .par_iter()
        .map(|&tau| {
            solve_quantile(&basis.matrix, &data.endogenous, tau, opts).map_err(|e| {
                QlsError::AtQuantile {
                    tau,
                    source: Box::new(e),
                }
            })
        })
        .collect();

    let mut coefficients = Vec::with_capacity(grid.len());
    let mut reports = Vec::with_capacity(grid.len());
    let mut dictionary = DMatrix::zeros(n, grid.len());
    for (k, (fit, &tau)) in fits.into_iter().zip(grid.taus()).enumerate() {
        let fit = fit?;
        dictionary.set_column(k, &(&basis.matrix * &fit.coefficients));
        reports.push(SolveReport {
            tau,
            iterations: fit.iterations,
            gap: fit.gap,
            objective: fit.objective,
            polished: fit.polished,
        });
        coefficients.push(fit.coefficients);
    }
    let crossing_rows = (0..n)
        .filter(|&i| (1..grid.len()).any(|k| dictionary[(i, k)] < dictionary[(i, k - 1)] - 1e-9))
        .count();
    Ok(FirstStageFit {
        grid: grid.clone(),
        basis,
        coefficients,
        dictionary,
        reports,
        crossing_rows,
    })
}
