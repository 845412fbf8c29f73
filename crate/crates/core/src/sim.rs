//! Monte Carlo designs and the replication driver.
//!
//! Every replication draws its own dataset from a child seed that depends
//! only on `(master seed, design, n, replication)`, so results do not depend
//! on the number of worker threads or on which other cells are run.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::control::fit_drcf;
use crate::data::Dataset;
use crate::error::{QlsError, Result};
use crate::instrument::{
    build_instrument_with_penalty, select_split_penalty, PenaltyKind, WeightKind, WeightMethod,
};
use crate::iv::{
    fit_2sls, fit_plugin_ols, CovarianceKind, IvFit, PluginMode, StructuralSpec, CRITICAL_95,
};
use crate::quantile::{fit_first_stage, BasisSpec, QuantileGrid, SolverOptions};

/// True structural coefficient on `X` in every design.
pub const TRUE_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Design {
    /// `X = Z₁ + Z₂ + ν`
    A,
    /// `X = Z₁ - cos(ω Z₂) + exp(γ Z₂) ν`
    B { omega: f64 },
    /// `X = Z₁ + Z₂ + σ(Z₂) ν` with binary `Z₂`
    C,
}

impl Design {
    pub fn omega(&self) -> Option<f64> {
        match self {
            Design::B { omega } => Some(*omega),
            _ => None,
        }
    }

    /// Basis used by the quantile-based estimators.
    pub fn default_basis(&self) -> BasisSpec {
        match self {
            Design::C => BasisSpec::QuadraticNoInstrumentSquares,
            _ => BasisSpec::QuadraticFull,
        }
    }

    fn seed_code(&self) -> u64 {
        match self {
            Design::A => 0xA,
            Design::B { omega } => 0xB ^ omega.to_bits().rotate_left(8),
            Design::C => 0xC,
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Design::A => f.write_str("A"),
            Design::B { omega } => write!(f, "B(omega={omega})"),
            Design::C => f.write_str("C"),
        }
    }
}

impl FromStr for Design {
    type Err = QlsError;

    /// Accepts `A`, `C`, and `B:<omega>` (for example `B:0.5`).
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "A" | "a" => Ok(Design::A),
            "C" | "c" => Ok(Design::C),
            _ => {
                let rest = t
                    .strip_prefix("B:")
                    .or_else(|| t.strip_prefix("b:"))
                    .ok_or_else(|| {
                        QlsError::Config(format!(
                            "unknown design '{s}' (expected A, B:<omega> or C)"
                        ))
                    })?;
                let omega: f64 = rest
                    .parse()
                    .map_err(|_| QlsError::Config(format!("invalid omega in design '{s}'")))?;
                if !omega.is_finite() {
                    return Err(QlsError::Config(format!(
                        "omega must be finite in design '{s}'"
                    )));
                }
                Ok(Design::B { omega })
            }
        }
    }
}

/// Data-generating process: design, sample size and nuisance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpSpec {
    pub design: Design,
    pub n: usize,
    /// `γ` in Design B's scale term.
    pub gamma_scale: f64,
    /// `σ(0)` and `σ(1)` in Design C.
    pub sigma0: f64,
    pub sigma1: f64,
    pub error_correlation: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(design: Design, n: usize, seed: u64) -> Self {
        Self {
            design,
            n,
            gamma_scale: 0.5,
            sigma0: 1.0,
            sigma1: 3.0,
            error_correlation: 0.6,
            seed,
        }
    }

    pub fn with_error_correlation(mut self, rho: f64) -> Self {
        self.error_correlation = rho;
        self
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for one replication, a fixed hash of
/// `(master seed, design, n, replication)`.
pub fn child_seed(master: u64, design: &Design, n: usize, replication: usize) -> u64 {
    let mut h = splitmix64(master);
    for part in [design.seed_code(), n as u64, replication as u64] {
        h = splitmix64(h ^ part);
    }
    h
}

/// Draw one dataset. Rows are generated in order, each drawing
/// `z₁, z₂, e₁, e₂`; the errors are `ε = e₁`, `ν = ρe₁ + √(1-ρ²)e₂`.
pub fn generate(spec: &DgpSpec, replication: usize) -> Result<Dataset> {
    let rho = spec.error_correlation;
    if !(rho.abs() <= 1.0) {
        return Err(QlsError::Config(format!(
            "error correlation {rho} outside [-1, 1]"
        )));
    }
    let n = spec.n;
    let mut rng = ChaCha20Rng::seed_from_u64(child_seed(spec.seed, &spec.design, n, replication));
    let chol = (1.0 - rho * rho).sqrt();
    let mut y = DVector::zeros(n);
    let mut x = DVector::zeros(n);
    let mut z1 = DMatrix::zeros(n, 1);
    let mut z2 = DMatrix::zeros(n, 1);
    for i in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = match spec.design {
            Design::C => {
                if rng.random::<f64>() < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => rng.sample(StandardNormal),
        };
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let eps = e1;
        let nu = rho * e1 + chol * e2;
        let xi = match spec.design {
            Design::A => a + b + nu,
            Design::B { omega } => a - (omega * b).cos() + (spec.gamma_scale * b).exp() * nu,
            Design::C => a + b + if b == 1.0 { spec.sigma1 } else { spec.sigma0 } * nu,
        };
        z1[(i, 0)] = a;
        z2[(i, 0)] = b;
        x[i] = xi;
        y[i] = 1.0 + a + TRUE_BETA * xi + eps;
    }
    Dataset::new(y, x, z1, z2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    ClassicIv,
    DrCf,
    Qls,
    QlsA,
    QlsR,
    QlsRA,
    QlsL1,
    QlsL1A,
    QlsL2,
    QlsL2A,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 10] = [
        EstimatorId::ClassicIv,
        EstimatorId::DrCf,
        EstimatorId::Qls,
        EstimatorId::QlsA,
        EstimatorId::QlsR,
        EstimatorId::QlsRA,
        EstimatorId::QlsL1,
        EstimatorId::QlsL1A,
        EstimatorId::QlsL2,
        EstimatorId::QlsL2A,
    ];

    pub fn id(self) -> &'static str {
        match self {
            EstimatorId::ClassicIv => "classic-iv",
            EstimatorId::DrCf => "dr-cf",
            EstimatorId::Qls => "qls",
            EstimatorId::QlsA => "qls-a",
            EstimatorId::QlsR => "qls-r",
            EstimatorId::QlsRA => "qls-r-a",
            EstimatorId::QlsL1 => "qls-l1",
            EstimatorId::QlsL1A => "qls-l1-a",
            EstimatorId::QlsL2 => "qls-l2",
            EstimatorId::QlsL2A => "qls-l2-a",
        }
    }

    /// Whether the estimate depends on the quantile grid.
    pub fn uses_grid(self) -> bool {
        self != EstimatorId::ClassicIv
    }

    /// Weighting scheme of the generated instrument, if any.
    pub fn weight_kind(self) -> Option<WeightKind> {
        match self {
            EstimatorId::Qls | EstimatorId::QlsA => Some(WeightKind::Equal),
            EstimatorId::QlsR | EstimatorId::QlsRA => Some(WeightKind::Ridge),
            EstimatorId::QlsL1 | EstimatorId::QlsL1A => Some(WeightKind::LassoEqualOnSupport),
            EstimatorId::QlsL2 | EstimatorId::QlsL2A => Some(WeightKind::LassoCoefficients),
            EstimatorId::ClassicIv | EstimatorId::DrCf => None,
        }
    }

    /// Analytic 2SLS (`-a`) rather than plug-in OLS.
    pub fn analytic(self) -> bool {
        matches!(
            self,
            EstimatorId::QlsA | EstimatorId::QlsRA | EstimatorId::QlsL1A | EstimatorId::QlsL2A
        )
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for EstimatorId {
    type Err = QlsError;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|e| e.id() == s.trim())
            .ok_or_else(|| QlsError::Config(format!("unknown estimator '{s}'")))
    }
}

/// `β̂` and its standard error for one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub beta: f64,
    pub se: f64,
}

impl From<&IvFit> for Estimate {
    fn from(fit: &IvFit) -> Self {
        Self {
            beta: fit.beta(),
            se: fit.beta_se(),
        }
    }
}

/// Fit the classic 2SLS estimator with the raw excluded instruments.
pub fn estimate_classic(data: &Dataset) -> Result<IvFit> {
    fit_2sls(data, &StructuralSpec::raw())
}

/// Fit one grid-based estimator on `data`.
pub fn estimate_with_grid(
    data: &Dataset,
    estimator: EstimatorId,
    grid: &QuantileGrid,
    basis: BasisSpec,
    seed: u64,
) -> Result<IvFit> {
    let fit = fit_first_stage(data, basis, grid, &SolverOptions::default())?;
    let mut cache = InstrumentCache::default();
    fit_estimator(data, estimator, &fit, seed, &mut cache)
}

/// Generated instruments and selected penalties shared by the estimators
/// of one replication.
#[derive(Default)]
struct InstrumentCache {
    entries: Vec<(WeightKind, Result<DVector<f64>>)>,
    penalties: Vec<(PenaltyKind, Result<f64>)>,
}

fn fit_estimator(
    data: &Dataset,
    estimator: EstimatorId,
    fit: &crate::quantile::FirstStageFit,
    seed: u64,
    cache: &mut InstrumentCache,
) -> Result<IvFit> {
    match estimator {
        EstimatorId::ClassicIv => estimate_classic(data),
        EstimatorId::DrCf => fit_drcf(data, fit, CovarianceKind::Robust),
        other => {
            let kind = other
                .weight_kind()
                .expect("Q-LS estimator has a weight kind");
            let values = match cache.entries.iter().find(|(k, _)| *k == kind) {
                Some((_, v)) => v.clone(),
                None => {
                    let method = WeightMethod::new(kind);
                    let penalty = match kind.penalty_kind() {
                        Some(pk) => {
                            let found = cache
                                .penalties
                                .iter()
                                .find(|(k, _)| *k == pk)
                                .map(|(_, p)| p.clone());
                            let p = found.unwrap_or_else(|| {
                                let p = select_split_penalty(
                                    &fit.dictionary,
                                    &data.endogenous,
                                    &method,
                                    seed,
                                );
                                cache.penalties.push((pk, p.clone()));
                                p
                            });
                            Some(p?)
                        }
                        None => None,
                    };
                    let v = build_instrument_with_penalty(fit, &data.endogenous, &method, penalty)
                        .map(|g| g.values);
                    cache.entries.push((kind, v.clone()));
                    v
                }
            }?;
            let spec = StructuralSpec::generated(values);
            if other.analytic() {
                fit_2sls(data, &spec)
            } else {
                fit_plugin_ols(data, &spec, PluginMode::Direct)
            }
        }
    }
}

/// Configuration of a Monte Carlo study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub designs: Vec<Design>,
    pub sample_sizes: Vec<usize>,
    pub grid_steps: Vec<f64>,
    pub estimators: Vec<EstimatorId>,
    pub replications: usize,
    pub master_seed: u64,
    pub jobs: usize,
    /// Replaces the design's default basis (corrected for Design C).
    pub basis: Option<BasisSpec>,
    pub gamma_scale: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub error_correlation: f64,
    /// Keep every per-replication estimate in the report.
    pub keep_trace: bool,
}

impl StudySpec {
    pub fn new(
        designs: Vec<Design>,
        sample_sizes: Vec<usize>,
        grid_steps: Vec<f64>,
        estimators: Vec<EstimatorId>,
        replications: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            designs,
            sample_sizes,
            grid_steps,
            estimators,
            replications,
            master_seed,
            jobs: 1,
            basis: None,
            gamma_scale: 0.5,
            sigma0: 1.0,
            sigma1: 3.0,
            error_correlation: 0.6,
            keep_trace: false,
        }
    }

    fn dgp(&self, design: Design, n: usize) -> DgpSpec {
        DgpSpec {
            design,
            n,
            gamma_scale: self.gamma_scale,
            sigma0: self.sigma0,
            sigma1: self.sigma1,
            error_correlation: self.error_correlation,
            seed: self.master_seed,
        }
    }
}

/// Aggregates for one `(design, n, step, estimator)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    /// Monte Carlo standard deviation of `β̂` (divisor `R - 1`).
    pub sd: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Per-replication outcome: an estimate or the error message.
pub type Outcome = std::result::Result<Estimate, String>;

/// Summary statistics over the successful replications, in index order.
pub fn aggregate(outcomes: &[Outcome]) -> CellSummary {
    let ok: Vec<&Estimate> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let r = ok.len();
    let failures = outcomes.len() - r;
    if r == 0 {
        return CellSummary {
            bias: f64::NAN,
            rmse: f64::NAN,
            coverage: f64::NAN,
            mean_se: f64::NAN,
            sd: f64::NAN,
            successes: 0,
            failures,
        };
    }
    let rf = r as f64;
    let mean_beta = ok.iter().map(|e| e.beta).sum::<f64>() / rf;
    let mse = ok.iter().map(|e| (e.beta - TRUE_BETA).powi(2)).sum::<f64>() / rf;
    let covered = ok
        .iter()
        .filter(|e| (e.beta - TRUE_BETA).abs() <= CRITICAL_95 * e.se)
        .count();
    let sd = if r > 1 {
        (ok.iter().map(|e| (e.beta - mean_beta).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    CellSummary {
        bias: mean_beta - TRUE_BETA,
        rmse: mse.sqrt(),
        coverage: covered as f64 / rf,
        mean_se: ok.iter().map(|e| e.se).sum::<f64>() / rf,
        sd,
        successes: r,
        failures,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub design: Design,
    pub n: usize,
    /// Grid step, `None` for estimators that do not use the grid.
    pub step: Option<f64>,
    pub k: Option<usize>,
    pub estimator: EstimatorId,
    pub basis: Option<BasisSpec>,
    pub summary: CellSummary,
    /// Per-replication outcomes when tracing was requested.
    pub trace: Option<Vec<Outcome>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub cells: Vec<CellReport>,
    pub replications: usize,
    pub master_seed: u64,
    pub notes: Vec<String>,
}

impl SimulationReport {
    pub fn find(
        &self,
        design: &Design,
        n: usize,
        step: Option<f64>,
        estimator: EstimatorId,
    ) -> Option<&CellReport> {
        self.cells.iter().find(|c| {
            c.design == *design
                && c.n == n
                && c.estimator == estimator
                && match (c.step, step) {
                    (None, _) => true,
                    (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                    (Some(_), None) => false,
                }
        })
    }
}

/// One replication: all requested estimators on a single dataset, in the
/// order (classic, then per grid step the grid-based estimators).
fn run_replication(
    spec: &StudySpec,
    dgp: &DgpSpec,
    grids: &[QuantileGrid],
    basis: BasisSpec,
    replication: usize,
) -> Vec<Outcome> {
    let mut out = Vec::new();
    let data = match generate(dgp, replication) {
        Ok(d) => d,
        Err(e) => {
            let count = slots(spec, grids.len());
            return vec![Err(e.to_string()); count];
        }
    };
    let seed = child_seed(dgp.seed, &dgp.design, dgp.n, replication) ^ 0x5EED_C0DE;
    if spec.estimators.contains(&EstimatorId::ClassicIv) {
        out.push(
            estimate_classic(&data)
                .map(|f| Estimate::from(&f))
                .map_err(|e| e.to_string()),
        );
    }
    let grid_estimators: Vec<EstimatorId> = spec
        .estimators
        .iter()
        .copied()
        .filter(|e| e.uses_grid())
        .collect();
    for grid in grids {
        if grid_estimators.is_empty() {
            break;
        }
        match fit_first_stage(&data, basis, grid, &SolverOptions::default()) {
            Ok(fit) => {
                let mut cache = InstrumentCache::default();
                for &est in &grid_estimators {
                    out.push(
                        fit_estimator(&data, est, &fit, seed, &mut cache)
                            .map(|f| Estimate::from(&f))
                            .map_err(|e| e.to_string()),
                    );
                }
            }
            Err(e) => {
                for _ in &grid_estimators {
                    out.push(Err(e.to_string()));
                }
            }
        }
    }
    out
}

fn slots(spec: &StudySpec, n_grids: usize) -> usize {
    let classic = usize::from(spec.estimators.contains(&EstimatorId::ClassicIv));
    let grid = spec.estimators.iter().filter(|e| e.uses_grid()).count();
    classic + grid * n_grids
}

/// Run every `(design, n)` cell. Replications are spread over `jobs`
/// worker threads; aggregation always folds in replication order, so the
/// report does not depend on `jobs`.
pub fn run_study(spec: &StudySpec) -> Result<SimulationReport> {
    if spec.replications < 2 {
        return Err(QlsError::Config(format!(
            "need at least 2 replications, got {}",
            spec.replications
        )));
    }
    if spec.designs.is_empty() || spec.sample_sizes.is_empty() || spec.estimators.is_empty() {
        return Err(QlsError::Config(
            "designs, sample sizes and estimators must be non-empty".into(),
        ));
    }
    if spec.estimators.iter().any(|e| e.uses_grid()) && spec.grid_steps.is_empty() {
        return Err(QlsError::Config(
            "grid-based estimators need at least one grid step".into(),
        ));
    }
    let mut estimators = spec.estimators.clone();
    estimators.sort();
    estimators.dedup();
    let spec = StudySpec {
        estimators,
        ..spec.clone()
    };
    let grids = spec
        .grid_steps
        .iter()
        .map(|&s| QuantileGrid::trimmed(s))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.max(1))
        .build()
        .map_err(|e| QlsError::Config(format!("cannot start worker pool: {e}")))?;

    let mut notes = Vec::new();
    let mut cells = Vec::new();
    for design in &spec.designs {
        let mut basis = spec.basis.unwrap_or_else(|| design.default_basis());
        if *design == Design::C && basis == BasisSpec::QuadraticFull {
            basis = BasisSpec::QuadraticNoInstrumentSquares;
            let note = "quadratic-full basis is singular with binary Z2 in design C; using quadratic-no-Z2sq".to_string();
            log::info!("{note}");
            if !notes.contains(&note) {
                notes.push(note);
            }
        }
        for &n in &spec.sample_sizes {
            let dgp = spec.dgp(*design, n);
            log::info!(
                "design {design}, n = {n}: {} replications",
                spec.replications
            );
            let per_rep: Vec<Vec<Outcome>> = pool.install(|| {
                (0..spec.replications)
                    .into_par_iter()
                    .map(|r| run_replication(&spec, &dgp, &grids, basis, r))
                    .collect()
            });
            let column = |slot: usize| -> Vec<Outcome> {
                per_rep.iter().map(|row| row[slot].clone()).collect()
            };
            let mut slot = 0;
            if spec.estimators.contains(&EstimatorId::ClassicIv) {
                let outcomes = column(slot);
                slot += 1;
                cells.push(CellReport {
                    design: *design,
                    n,
                    step: None,
                    k: None,
                    estimator: EstimatorId::ClassicIv,
                    basis: None,
                    summary: aggregate(&outcomes),
                    trace: spec.keep_trace.then_some(outcomes),
                });
            }
            for grid in &grids {
                for &est in spec.estimators.iter().filter(|e| e.uses_grid()) {
                    let outcomes = column(slot);
                    slot += 1;
                    cells.push(CellReport {
                        design: *design,
                        n,
                        step: Some(grid.step()),
                        k: Some(grid.len()),
                        estimator: est,
                        basis: Some(basis),
                        summary: aggregate(&outcomes),
                        trace: spec.keep_trace.then_some(outcomes),
                    });
                }
            }
        }
    }
    Ok(SimulationReport {
        cells,
        replications: spec.replications,
        master_seed: spec.master_seed,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_estimator_aggregates() {
        let outcomes: Vec<Outcome> = vec![Ok(Estimate { beta: 1.0, se: 1.0 }); 5];
        let s = aggregate(&outcomes);
        assert_eq!(s.bias, 0.0);
        assert_eq!(s.rmse, 0.0);
        assert_eq!(s.coverage, 1.0);
        assert_eq!(s.mean_se, 1.0);
        assert_eq!(s.failures, 0);
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let outcomes: Vec<Outcome> = vec![
            Ok(Estimate { beta: 1.5, se: 0.1 }),
            Err("singular".into()),
            Ok(Estimate { beta: 0.5, se: 1.0 }),
        ];
        let s = aggregate(&outcomes);
        assert_eq!(s.failures, 1);
        assert_eq!(s.successes, 2);
        assert!(s.bias.abs() < 1e-15);
        assert!((s.rmse - 0.5).abs() < 1e-15);
        assert_eq!(s.coverage, 0.5);
    }

    #[test]
    fn design_parsing() {
        assert_eq!("A".parse::<Design>().unwrap(), Design::A);
        assert_eq!("B:0.5".parse::<Design>().unwrap(), Design::B { omega: 0.5 });
        assert!("B".parse::<Design>().is_err());
        assert!("D".parse::<Design>().is_err());
        for e in EstimatorId::ALL {
            assert_eq!(e.id().parse::<EstimatorId>().unwrap(), e);
        }
    }

    #[test]
    fn seeds_differ_across_cells() {
        let a = child_seed(1, &Design::A, 500, 0);
        assert_ne!(a, child_seed(1, &Design::A, 500, 1));
        assert_ne!(a, child_seed(1, &Design::A, 1000, 0));
        assert_ne!(a, child_seed(1, &Design::C, 500, 0));
        assert_ne!(
            child_seed(1, &Design::B { omega: 0.0 }, 500, 0),
            child_seed(1, &Design::B { omega: 0.5 }, 500, 0)
        );
        assert_ne!(a, child_seed(2, &Design::A, 500, 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DgpSpec::new(Design::B { omega: 0.5 }, 50, 7);
        assert_eq!(generate(&spec, 3).unwrap(), generate(&spec, 3).unwrap());
        assert_ne!(generate(&spec, 3).unwrap(), generate(&spec, 4).unwrap());
    }

    #[test]
    fn too_few_replications() {
        let spec = StudySpec::new(
            vec![Design::A],
            vec![50],
            vec![0.1],
            vec![EstimatorId::ClassicIv],
            1,
            0,
        );
        assert!(matches!(run_study(&spec), Err(QlsError::Config(_))));
    }
}
