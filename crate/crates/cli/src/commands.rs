//! Subcommand definitions and their implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use qls_core::control::fit_drcf;
use qls_core::diagnostics::{
    diagnose, mean_first_stage_f, DecisionLabel, DiagnosticsReport, EstimateComparison,
};
use qls_core::instrument::{
    build_instrument, GeneratedInstrument, SplitRule, WeightKind, WeightMethod,
};
use qls_core::iv::{fit_2sls, fit_plugin_ols, CovarianceKind, IvFit, PluginMode, StructuralSpec};
use qls_core::quantile::{fit_first_stage, BasisSpec, FirstStageFit, QuantileGrid, SolverOptions};
use qls_core::sim::{run_study, EstimatorId, SimulationReport};
use qls_core::{Dataset, QlsError};

use crate::config::{parse_basis, OutputFormat, StudyConfig, DEFAULT_SEED};
use crate::error::{CliError, Result};
use crate::report;
use crate::tabular::{load_csv, split_columns, ColumnRoles, LoadedData};

#[derive(Debug, Parser)]
#[command(
    name = "qls",
    version,
    about = "Quantile least squares IV estimation, diagnostics and simulation"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo study described by a TOML config file.
    Simulate(SimulateArgs),
    /// Estimate the structural coefficient on a CSV dataset.
    Estimate(EstimateArgs),
    /// Report mean, quantile and distributional first-stage strength.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Study configuration (TOML); every key is optional.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Dataset location and column roles shared by `estimate` and `diagnose`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input CSV file with a header row
    #[arg(long)]
    pub data: PathBuf,
    /// Endogenous regressor column.
    #[arg(long)]
    pub endog: String,
    /// Comma-separated included exogenous columns.
    #[arg(long, default_value = "")]
    pub controls: String,
    /// Comma-separated excluded instrument columns.
    #[arg(long, default_value = "")]
    pub instruments: String,
    /// Cluster identifier column for cluster-robust standard errors.
    #[arg(long)]
    pub cluster: Option<String>,
    /// Drop rows whose endogenous value exceeds this upper quantile
    /// fraction (ties at the cutoff are kept).
    #[arg(long)]
    pub trim_top: Option<f64>,
    /// Quantile grid step (grid 0.01, 0.01 + step, ... below 1).
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
    /// First-stage basis: linear, quadratic-full or quadratic-no-Z2sq.
    /// Defaults to quadratic-full, or quadratic-no-Z2sq when an instrument
    /// is binary.
    #[arg(long)]
    pub basis: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Outcome column
    #[arg(long)]
    pub outcome: String,
    /// Use the generated Q-LS instrument instead of the raw instruments.
    #[arg(long)]
    pub qls: bool,
    /// Weighting of the quantile dictionary: equal, ols, ridge,
    /// lasso-equal or lasso-coef.
    #[arg(long, default_value = "equal")]
    pub weights: String,
    /// Named estimator (classic-iv, dr-cf, qls, qls-a, ...); overrides
    /// --qls/--weights/--plugin.
    #[arg(long)]
    pub estimator: Option<String>,
    /// With --qls, report plug-in OLS on the generated instrument instead
    /// of 2SLS.
    #[arg(long)]
    pub plugin: bool,
    /// Choose the penalty-selection half of the sample at random (seeded)
    /// instead of taking the first rows.
    #[arg(long)]
    pub random_split: bool,
    /// Seed for cross-validation folds and the random split
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// CSV output path.
    #[arg(long, default_value = "estimate.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// CSV output path.
    #[arg(long, default_value = "diagnostics.csv")]
    pub out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}

/// Run the studies of a config and write `simulation.csv` (and the table
/// and trace files) into the output directory.
pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<SimulationReport> {
    let mut config = StudyConfig::from_path(&args.config)?;
    if let Some(r) = args.reps {
        if r < 2 {
            return Err(CliError::config(
                "--reps",
                format!("need at least 2, got {r}"),
            ));
        }
        config.replications = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(CliError::config("--jobs", "must be at least 1"));
        }
        config.jobs = j;
    }
    if let Some(dir) = &args.out {
        config.output_dir = dir.clone();
    }
    let report = simulate(&config)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| CliError::io(&config.output_dir, e))?;
    let mut written = Vec::new();
    if config.format != OutputFormat::Table {
        let path = config.output_dir.join("simulation.csv");
        report::write_simulation_csv(create(&path)?, &report)?;
        written.push(path);
    }
    let table = report::simulation_table(&report);
    if config.format != OutputFormat::Csv {
        let path = config.output_dir.join("simulation.txt");
        std::fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
        emit(out, &table)?;
    }
    if config.trace {
        let path = config.output_dir.join("trace.csv");
        report::write_trace_csv(create(&path)?, &report)?;
        written.push(path);
    }
    for p in written {
        emit(out, &format!("wrote {}\n", p.display()))?;
    }
    Ok(report)
}

/// Run every design block of `config` and concatenate the reports.
pub fn simulate(config: &StudyConfig) -> Result<SimulationReport> {
    let mut merged = SimulationReport {
        cells: Vec::new(),
        replications: config.replications,
        master_seed: config.seed,
        notes: Vec::new(),
    };
    for spec in config.study_specs() {
        let r = run_study(&spec)?;
        merged.cells.extend(r.cells);
        for note in r.notes {
            if !merged.notes.contains(&note) {
                merged.notes.push(note);
            }
        }
    }
    Ok(merged)
}

fn covariance(args: &DataArgs) -> CovarianceKind {
    if args.cluster.is_some() {
        CovarianceKind::Cluster
    } else {
        CovarianceKind::Robust
    }
}

fn load(args: &DataArgs, outcome: Option<&str>, out: &mut dyn Write) -> Result<LoadedData> {
    let roles = ColumnRoles {
        outcome: outcome.map(str::to_owned),
        endogenous: args.endog.clone(),
        controls: split_columns(&args.controls),
        instruments: split_columns(&args.instruments),
        cluster: args.cluster.clone(),
    };
    let loaded = load_csv(&args.data, &roles, args.trim_top)?;
    emit(out, &format!("{}\n", loaded.summary()))?;
    Ok(loaded)
}

fn resolve_basis(args: &DataArgs, data: &Dataset) -> Result<BasisSpec> {
    match &args.basis {
        Some(b) => parse_basis(b).ok_or_else(|| {
            CliError::config(
                "--basis",
                format!("unknown basis '{b}' (linear, quadratic-full, quadratic-no-Z2sq)"),
            )
        }),
        None => {
            let binary = data
                .instruments
                .column_iter()
                .any(|c| c.iter().all(|&v| v == 0.0 || v == 1.0));
            Ok(if binary {
                BasisSpec::QuadraticNoInstrumentSquares
            } else {
                BasisSpec::QuadraticFull
            })
        }
    }
}

fn first_stage(args: &DataArgs, data: &Dataset) -> Result<FirstStageFit> {
    let grid =
        QuantileGrid::trimmed(args.step).map_err(|e| CliError::config("--step", e.to_string()))?;
    let basis = resolve_basis(args, data)?;
    Ok(fit_first_stage(
        data,
        basis,
        &grid,
        &SolverOptions::default(),
    )?)
}

/// The estimator requested on the `estimate` command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorChoice {
    Classic,
    ControlFunction,
    Qls { kind: WeightKind, analytic: bool },
}

impl EstimatorChoice {
    pub fn from_args(args: &EstimateArgs) -> Result<Self> {
        if let Some(id) = &args.estimator {
            let est: EstimatorId = id.parse().map_err(|_| {
                CliError::config("--estimator", format!("unknown estimator id '{id}'"))
            })?;
            return Ok(match est {
                EstimatorId::ClassicIv => EstimatorChoice::Classic,
                EstimatorId::DrCf => EstimatorChoice::ControlFunction,
                other => EstimatorChoice::Qls {
                    kind: other
                        .weight_kind()
                        .expect("Q-LS estimator has a weight kind"),
                    analytic: other.analytic(),
                },
            });
        }
        if args.qls {
            let kind: WeightKind = args.weights.parse().map_err(|_| {
                CliError::config(
                    "--weights",
                    format!("unknown weight method '{}'", args.weights),
                )
            })?;
            Ok(EstimatorChoice::Qls {
                kind,
                analytic: !args.plugin,
            })
        } else {
            Ok(EstimatorChoice::Classic)
        }
    }

    fn uses_first_stage(self) -> bool {
        self != EstimatorChoice::Classic
    }
}

fn is_degenerate(e: &QlsError) -> bool {
    matches!(
        e,
        QlsError::WeakInstrument { .. }
            | QlsError::DegenerateInstrument(_)
            | QlsError::Singular(_)
            | QlsError::RankDeficient { .. }
    )
}

fn instrument_summary(g: &GeneratedInstrument) -> String {
    let w = &g.weights;
    let mut s = format!(
        "generated instrument: {} weights over K = {} quantiles (basis {}, step {})",
        w.kind.id(),
        g.k,
        g.basis.id(),
        g.grid_step
    );
    if let Some(p) = w.penalty {
        s.push_str(&format!(", penalty {}", report::sig6(p)));
    }
    if let Some(support) = &w.support {
        s.push_str(&format!(", support size {}", support.len()));
    }
    s.push('\n');
    for warning in &w.warnings {
        s.push_str(&format!("warning: {warning}\n"));
    }
    s
}

fn fit_choice(
    choice: EstimatorChoice,
    data: &Dataset,
    fit: Option<&FirstStageFit>,
    cov: CovarianceKind,
    args: &EstimateArgs,
    out: &mut dyn Write,
) -> Result<IvFit> {
    match choice {
        EstimatorChoice::Classic => {
            Ok(fit_2sls(data, &StructuralSpec::raw().with_covariance(cov))?)
        }
        EstimatorChoice::ControlFunction => Ok(fit_drcf(data, fit.expect("first stage"), cov)?),
        EstimatorChoice::Qls { kind, analytic } => {
            let mut method = WeightMethod::new(kind);
            if args.random_split {
                method.split = SplitRule::Random { seed: args.seed };
            }
            let generated = build_instrument(
                fit.expect("first stage"),
                &data.endogenous,
                &method,
                args.seed,
            )?;
            emit(out, &instrument_summary(&generated))?;
            let spec = StructuralSpec::generated(generated.values).with_covariance(cov);
            let mut fit = if analytic {
                fit_2sls(data, &spec)?
            } else {
                fit_plugin_ols(data, &spec, PluginMode::Direct)?
            };
            fit.warnings.extend(generated.weights.warnings);
            Ok(fit)
        }
    }
}

fn advise_reduced_form(e: QlsError, out: &mut dyn Write) -> CliError {
    let text = format!(
        "estimation failed: {e}\nreduced-form advice: {}\n",
        DecisionLabel::BothWeak.advice()
    );
    match emit(out, &text) {
        Ok(()) => CliError::Estimation(e),
        Err(io) => io,
    }
}

/// The quantile first stage itself is degenerate: report the mean
/// first-stage F, which needs no quantile fit, then fail.
fn degenerate_exit<T>(
    data: &Dataset,
    cov: CovarianceKind,
    e: QlsError,
    out: &mut dyn Write,
) -> Result<T> {
    if data.instruments.ncols() > 0 {
        match mean_first_stage_f(data, cov) {
            Ok((f, df)) => emit(
                out,
                &format!("mean first-stage F: {} (df {df})\n", report::sig6(f)),
            )?,
            Err(m) => emit(out, &format!("mean first-stage F unavailable: {m}\n"))?,
        }
    }
    Err(advise_reduced_form(e, out))
}

/// Outcome of `estimate`: the fit plus the diagnostics that were printed.
#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub fit: IvFit,
    pub diagnostics: Option<DiagnosticsReport>,
}

pub fn cmd_estimate(args: &EstimateArgs, out: &mut dyn Write) -> Result<EstimateResult> {
    let choice = EstimatorChoice::from_args(args)?;
    let loaded = load(&args.data, Some(&args.outcome), out)?;
    let data = &loaded.data;
    let cov = covariance(&args.data);
    if data.instruments.ncols() == 0 && !matches!(choice, EstimatorChoice::Qls { .. }) {
        return Err(CliError::config(
            "--instruments",
            "at least one excluded instrument is required (or use --qls)",
        ));
    }
    let fit = if choice.uses_first_stage() || data.instruments.ncols() > 0 {
        match first_stage(&args.data, data) {
            Ok(f) => Some(f),
            Err(CliError::Estimation(e)) if is_degenerate(&e) => {
                return degenerate_exit(data, cov, e, out)
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let estimate = fit_choice(choice, data, fit.as_ref(), cov, args, out);
    let comparison = match (&estimate, choice) {
        (Ok(f), EstimatorChoice::Qls { .. }) => {
            fit_2sls(data, &StructuralSpec::raw().with_covariance(cov))
                .ok()
                .map(|tsls| EstimateComparison {
                    qls_beta: f.beta(),
                    tsls_beta: tsls.beta(),
                })
        }
        _ => None,
    };
    let diagnostics = match (&fit, data.instruments.ncols()) {
        (Some(fs), k) if k > 0 => match diagnose(data, cov, fs, comparison.as_ref()) {
            Ok(d) => Some(d),
            Err(e) => {
                emit(out, &format!("warning: diagnostics unavailable: {e}\n"))?;
                None
            }
        },
        _ => None,
    };
    if let Some(d) = &diagnostics {
        emit(out, &report::diagnostics_text(d, false))?;
    }

    let fit = match estimate {
        Ok(f) => f,
        Err(CliError::Estimation(e)) if is_degenerate(&e) => {
            return Err(advise_reduced_form(e, out))
        }
        Err(e) => return Err(e),
    };
    emit(out, &report::estimate_text(&fit))?;
    report::write_estimate_csv(create(&args.out)?, &fit, diagnostics.as_ref())?;
    emit(out, &format!("wrote {}\n", args.out.display()))?;
    Ok(EstimateResult { fit, diagnostics })
}

pub fn cmd_diagnose(args: &DiagnoseArgs, out: &mut dyn Write) -> Result<DiagnosticsReport> {
    let loaded = load(&args.data, None, out)?;
    let data = &loaded.data;
    if data.instruments.ncols() == 0 {
        return Err(CliError::config(
            "--instruments",
            "at least one excluded instrument is required",
        ));
    }
    let cov = covariance(&args.data);
    let fit = match first_stage(&args.data, data) {
        Ok(f) => f,
        Err(CliError::Estimation(e)) if is_degenerate(&e) => {
            return degenerate_exit(data, cov, e, out)
        }
        Err(e) => return Err(e),
    };
    let d = diagnose(data, cov, &fit, None)?;
    emit(out, &report::diagnostics_text(&d, true))?;
    report::write_diagnostics_csv(create(&args.out)?, &d)?;
    emit(out, &format!("wrote {}\n", args.out.display()))?;
    Ok(d)
}

/// Dispatch a parsed command line.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, out).map(|_| ()),
        Command::Estimate(a) => cmd_estimate(a, out).map(|_| ()),
        Command::Diagnose(a) => cmd_diagnose(a, out).map(|_| ()),
    }
}
