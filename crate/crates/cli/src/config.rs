//! Study configuration files.
//!
//! The format is TOML: flat top-level keys plus one `[[design]]` table per
//! design. Unknown keys are rejected. Every key is optional; the defaults
//! run the full simulation grid.
//!
//! ```toml
//! replications = 1000
//! seed = 20240101
//! sample_sizes = [500, 1000]
//! grid_steps = [0.10, 0.05, 0.01, 0.001]
//!
//! [[design]]
//! kind = "B"
//! omega = 0.5
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use qls_core::quantile::{BasisSpec, QuantileGrid};
use qls_core::sim::{Design, EstimatorId, StudySpec};

use crate::error::{CliError, Result};

pub const DEFAULT_SEED: u64 = 20240101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Table,
    #[default]
    Both,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    kind: Option<String>,
    omega: Option<f64>,
    gamma_scale: Option<f64>,
    sigma0: Option<f64>,
    sigma1: Option<f64>,
    basis: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    replications: Option<usize>,
    seed: Option<u64>,
    jobs: Option<usize>,
    sample_sizes: Option<Vec<usize>>,
    grid_steps: Option<Vec<f64>>,
    estimators: Option<Vec<String>>,
    error_correlation: Option<f64>,
    output_dir: Option<PathBuf>,
    format: Option<OutputFormat>,
    trace: Option<bool>,
    design: Option<Vec<RawDesign>>,
}

/// One design block with its nuisance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignConfig {
    pub design: Design,
    pub gamma_scale: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub basis: Option<BasisSpec>,
}

impl DesignConfig {
    pub fn new(design: Design) -> Self {
        Self {
            design,
            gamma_scale: 0.5,
            sigma0: 1.0,
            sigma1: 3.0,
            basis: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub designs: Vec<DesignConfig>,
    pub sample_sizes: Vec<usize>,
    pub grid_steps: Vec<f64>,
    pub estimators: Vec<EstimatorId>,
    pub replications: usize,
    pub seed: u64,
    pub jobs: usize,
    pub error_correlation: f64,
    pub output_dir: PathBuf,
    pub format: OutputFormat,
    pub trace: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            designs: vec![
                DesignConfig::new(Design::A),
                DesignConfig::new(Design::B { omega: 0.0 }),
                DesignConfig::new(Design::B { omega: 0.5 }),
                DesignConfig::new(Design::C),
            ],
            sample_sizes: vec![500, 1000],
            grid_steps: vec![0.10, 0.05, 0.01, 0.001],
            estimators: EstimatorId::ALL.to_vec(),
            replications: 1000,
            seed: DEFAULT_SEED,
            jobs: 1,
            error_correlation: 0.6,
            output_dir: PathBuf::from("."),
            format: OutputFormat::Both,
            trace: false,
        }
    }
}

pub fn parse_basis(s: &str) -> Option<BasisSpec> {
    match s {
        "linear" => Some(BasisSpec::Linear),
        "quadratic-full" => Some(BasisSpec::QuadraticFull),
        "quadratic-no-Z2sq" => Some(BasisSpec::QuadraticNoInstrumentSquares),
        _ => None,
    }
}

impl StudyConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "config".into());
            CliError::config(key, e.message().to_string())
        })?;
        let mut cfg = StudyConfig::default();
        if let Some(r) = raw.replications {
            if r < 2 {
                return Err(CliError::config(
                    "replications",
                    format!("need at least 2, got {r}"),
                ));
            }
            cfg.replications = r;
        }
        if let Some(s) = raw.seed {
            cfg.seed = s;
        }
        if let Some(j) = raw.jobs {
            if j == 0 {
                return Err(CliError::config("jobs", "must be at least 1"));
            }
            cfg.jobs = j;
        }
        if let Some(ns) = raw.sample_sizes {
            if ns.is_empty() {
                return Err(CliError::config("sample_sizes", "must not be empty"));
            }
            for (i, &n) in ns.iter().enumerate() {
                if n < 20 {
                    return Err(CliError::config(
                        format!("sample_sizes[{i}]"),
                        format!("sample size {n} is below 20"),
                    ));
                }
            }
            cfg.sample_sizes = ns;
        }
        if let Some(steps) = raw.grid_steps {
            for (i, &s) in steps.iter().enumerate() {
                QuantileGrid::trimmed(s).map_err(|e| {
                    CliError::config(format!("grid_steps[{i}]"), format!("invalid step {s}: {e}"))
                })?;
            }
            cfg.grid_steps = steps;
        }
        if let Some(ids) = raw.estimators {
            if ids.is_empty() {
                return Err(CliError::config("estimators", "must not be empty"));
            }
            cfg.estimators = ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    id.parse::<EstimatorId>().map_err(|_| {
                        CliError::config(
                            format!("estimators[{i}]"),
                            format!("unknown estimator id '{id}'"),
                        )
                    })
                })
                .collect::<Result<_>>()?;
        }
        if cfg.estimators.iter().any(|e| e.uses_grid()) && cfg.grid_steps.is_empty() {
            return Err(CliError::config(
                "grid_steps",
                "grid-based estimators need at least one step",
            ));
        }
        if let Some(rho) = raw.error_correlation {
            if !(rho.abs() < 1.0) {
                return Err(CliError::config(
                    "error_correlation",
                    format!("{rho} outside (-1, 1)"),
                ));
            }
            cfg.error_correlation = rho;
        }
        if let Some(dir) = raw.output_dir {
            cfg.output_dir = dir;
        }
        if let Some(f) = raw.format {
            cfg.format = f;
        }
        if let Some(t) = raw.trace {
            cfg.trace = t;
        }
        if let Some(designs) = raw.design {
            if designs.is_empty() {
                return Err(CliError::config(
                    "design",
                    "at least one design is required",
                ));
            }
            cfg.designs = designs
                .into_iter()
                .enumerate()
                .map(|(i, d)| design_from_raw(i, d))
                .collect::<Result<_>>()?;
        }
        Ok(cfg)
    }

    /// The `(design, n, K, estimator)` rows a run of this config reports,
    /// in output order. `K` is `None` for classic IV.
    pub fn planned_rows(&self) -> Result<Vec<(Design, usize, Option<usize>, EstimatorId)>> {
        let mut estimators = self.estimators.clone();
        estimators.sort();
        estimators.dedup();
        let grids = self
            .grid_steps
            .iter()
            .map(|&s| QuantileGrid::trimmed(s).map(|g| g.len()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut rows = Vec::new();
        for d in &self.designs {
            for &n in &self.sample_sizes {
                if estimators.contains(&EstimatorId::ClassicIv) {
                    rows.push((d.design, n, None, EstimatorId::ClassicIv));
                }
                for &k in &grids {
                    for &e in estimators.iter().filter(|e| e.uses_grid()) {
                        rows.push((d.design, n, Some(k), e));
                    }
                }
            }
        }
        Ok(rows)
    }

    /// One core study per design block (designs may carry their own
    /// nuisance parameters).
    pub fn study_specs(&self) -> Vec<StudySpec> {
        self.designs
            .iter()
            .map(|d| {
                let mut s = StudySpec::new(
                    vec![d.design],
                    self.sample_sizes.clone(),
                    self.grid_steps.clone(),
                    self.estimators.clone(),
                    self.replications,
                    self.seed,
                );
                s.jobs = self.jobs;
                s.basis = d.basis;
                s.gamma_scale = d.gamma_scale;
                s.sigma0 = d.sigma0;
                s.sigma1 = d.sigma1;
                s.error_correlation = self.error_correlation;
                s.keep_trace = self.trace;
                s
            })
            .collect()
    }
}

fn design_from_raw(i: usize, d: RawDesign) -> Result<DesignConfig> {
    let key = |field: &str| format!("design[{i}].{field}");
    let kind = d
        .kind
        .ok_or_else(|| CliError::config(key("kind"), "missing design kind (A, B or C)"))?;
    let design = match kind.as_str() {
        "A" => Design::A,
        "C" => Design::C,
        "B" => {
            let omega = d
                .omega
                .ok_or_else(|| CliError::config(key("omega"), "design B needs omega"))?;
            if !omega.is_finite() {
                return Err(CliError::config(key("omega"), "must be finite"));
            }
            Design::B { omega }
        }
        other => {
            return Err(CliError::config(
                key("kind"),
                format!("unknown design '{other}'"),
            ))
        }
    };
    if d.omega.is_some() && !matches!(design, Design::B { .. }) {
        return Err(CliError::config(key("omega"), "only design B takes omega"));
    }
    let mut out = DesignConfig::new(design);
    if let Some(g) = d.gamma_scale {
        out.gamma_scale = g;
    }
    if let Some(s) = d.sigma0 {
        out.sigma0 = s;
    }
    if let Some(s) = d.sigma1 {
        out.sigma1 = s;
    }
    if let Some(b) = d.basis {
        out.basis = Some(
            parse_basis(&b)
                .ok_or_else(|| CliError::config(key("basis"), format!("unknown basis '{b}'")))?,
        );
    }
    Ok(out)
}
