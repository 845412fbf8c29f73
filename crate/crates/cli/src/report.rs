//! Serializers for simulation, estimation and diagnostic results.
//!
//! CSV files carry full precision (`{:.16e}`, 17 significant digits) and
//! parse back losslessly; human tables round to 6 significant digits.

use std::fmt::Write as _;
use std::io::Write;

use qls_core::diagnostics::DiagnosticsReport;
use qls_core::iv::{IvFit, CRITICAL_95};
use qls_core::sim::{CellReport, Design, EstimatorId, SimulationReport};

use crate::error::{CliError, Result};

pub const SIMULATION_COLUMNS: [&str; 14] = [
    "design",
    "omega",
    "n",
    "step",
    "k",
    "estimator",
    "basis",
    "bias",
    "rmse",
    "coverage",
    "mean_se",
    "sd",
    "successes",
    "failures",
];

pub fn full(v: f64) -> String {
    format!("{v:.16e}")
}

/// `v` rounded to 6 significant digits, without trailing zeros.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&magnitude) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn design_kind(d: &Design) -> &'static str {
    match d {
        Design::A => "A",
        Design::B { .. } => "B",
        Design::C => "C",
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per `(design, n, step, estimator)` cell.
pub fn write_simulation_csv<W: Write>(out: W, report: &SimulationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SIMULATION_COLUMNS)?;
    for c in &report.cells {
        let s = &c.summary;
        w.write_record([
            design_kind(&c.design).to_string(),
            opt(c.design.omega().map(full)),
            c.n.to_string(),
            opt(c.step.map(full)),
            opt(c.k),
            c.estimator.id().to_string(),
            opt(c.basis.map(|b| b.id())),
            full(s.bias),
            full(s.rmse),
            full(s.coverage),
            full(s.mean_se),
            full(s.sd),
            s.successes.to_string(),
            s.failures.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io("<simulation csv>", e))
}

/// A parsed row of the simulation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRow {
    pub design: Design,
    pub n: usize,
    pub step: Option<f64>,
    pub k: Option<usize>,
    pub estimator: EstimatorId,
    pub basis: Option<String>,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub sd: f64,
    pub successes: usize,
    pub failures: usize,
}

impl SimulationRow {
    pub fn from_cell(c: &CellReport) -> Self {
        Self {
            design: c.design,
            n: c.n,
            step: c.step,
            k: c.k,
            estimator: c.estimator,
            basis: c.basis.map(|b| b.id().to_string()),
            bias: c.summary.bias,
            rmse: c.summary.rmse,
            coverage: c.summary.coverage,
            mean_se: c.summary.mean_se,
            sd: c.summary.sd,
            successes: c.summary.successes,
            failures: c.summary.failures,
        }
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, j: usize, line: u64) -> Result<T> {
    let cell = rec.get(j).unwrap_or("");
    cell.parse().map_err(|_| CliError::Parse {
        path: "<simulation csv>".into(),
        line,
        message: format!("column '{}': cannot parse '{cell}'", SIMULATION_COLUMNS[j]),
    })
}

fn parse_optional<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    j: usize,
    line: u64,
) -> Result<Option<T>> {
    if rec.get(j).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        parse_field(rec, j, line).map(Some)
    }
}

/// Parse a file produced by [`write_simulation_csv`].
pub fn read_simulation_csv<R: std::io::Read>(input: R) -> Result<Vec<SimulationRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(SIMULATION_COLUMNS) {
        return Err(CliError::Parse {
            path: "<simulation csv>".into(),
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let omega: Option<f64> = parse_optional(&rec, 1, line)?;
        let design = match (rec.get(0).unwrap_or(""), omega) {
            ("A", None) => Design::A,
            ("C", None) => Design::C,
            ("B", Some(omega)) => Design::B { omega },
            (d, _) => {
                return Err(CliError::Parse {
                    path: "<simulation csv>".into(),
                    line,
                    message: format!("bad design '{d}'"),
                })
            }
        };
        let estimator: String = parse_field(&rec, 5, line)?;
        rows.push(SimulationRow {
            design,
            n: parse_field(&rec, 2, line)?,
            step: parse_optional(&rec, 3, line)?,
            k: parse_optional(&rec, 4, line)?,
            estimator: estimator.parse()?,
            basis: parse_optional(&rec, 6, line)?,
            bias: parse_field(&rec, 7, line)?,
            rmse: parse_field(&rec, 8, line)?,
            coverage: parse_field(&rec, 9, line)?,
            mean_se: parse_field(&rec, 10, line)?,
            sd: parse_field(&rec, 11, line)?,
            successes: parse_field(&rec, 12, line)?,
            failures: parse_field(&rec, 13, line)?,
        });
    }
    Ok(rows)
}

/// Per-replication estimates of traced cells: one row per replication.
pub fn write_trace_csv<W: Write>(out: W, report: &SimulationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "design",
        "n",
        "step",
        "estimator",
        "replication",
        "beta",
        "se",
        "error",
    ])?;
    for c in &report.cells {
        let Some(trace) = &c.trace else { continue };
        for (r, outcome) in trace.iter().enumerate() {
            let (beta, se, err) = match outcome {
                Ok(e) => (full(e.beta), full(e.se), String::new()),
                Err(msg) => (String::new(), String::new(), msg.clone()),
            };
            w.write_record([
                c.design.to_string(),
                c.n.to_string(),
                opt(c.step.map(full)),
                c.estimator.id().to_string(),
                r.to_string(),
                beta,
                se,
                err,
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io("<trace csv>", e))
}

/// Table in the `Bias(RMSE)Cov.` layout: one block per design, one row per
/// estimator and grid, one column per sample size.
pub fn simulation_table(report: &SimulationReport) -> String {
    let mut designs: Vec<Design> = Vec::new();
    let mut ns: Vec<usize> = Vec::new();
    for c in &report.cells {
        if !designs.contains(&c.design) {
            designs.push(c.design);
        }
        if !ns.contains(&c.n) {
            ns.push(c.n);
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} replications, master seed {}",
        report.replications, report.master_seed
    );
    for d in &designs {
        let _ = writeln!(out, "\nDesign {d}");
        let mut rows: Vec<(EstimatorId, Option<f64>, Option<usize>)> = Vec::new();
        for c in report.cells.iter().filter(|c| c.design == *d) {
            if !rows.iter().any(|r| r.0 == c.estimator && r.1 == c.step) {
                rows.push((c.estimator, c.step, c.k));
            }
        }
        let _ = write!(out, "{:<12} {:>5}", "estimator", "K");
        for n in &ns {
            let _ = write!(out, "  {:>38}", format!("n={n}  Bias(RMSE)Cov."));
        }
        out.push('\n');
        for (est, step, k) in rows {
            let _ = write!(out, "{:<12} {:>5}", est.id(), opt(k));
            for &n in &ns {
                let cell = report
                    .cells
                    .iter()
                    .find(|c| c.design == *d && c.n == n && c.estimator == est && c.step == step);
                let text = match cell {
                    Some(c) => {
                        let s = &c.summary;
                        let mut t =
                            format!("{}({}){}", sig6(s.bias), sig6(s.rmse), sig6(s.coverage));
                        if s.failures > 0 {
                            t.push_str(&format!(" [{} failed]", s.failures));
                        }
                        t
                    }
                    None => "-".into(),
                };
                let _ = write!(out, "  {text:>38}");
            }
            out.push('\n');
        }
    }
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}

/// Long-format estimate CSV: `(section, term, value)`.
pub fn write_estimate_csv<W: Write>(
    out: W,
    fit: &IvFit,
    diagnostics: Option<&DiagnosticsReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["section", "term", "value"])?;
    w.write_record(["meta", "method", fit.method.tag()])?;
    w.write_record(["meta", "n", &fit.n.to_string()])?;
    for (j, name) in fit.names.iter().enumerate() {
        let (lo, hi) = fit.interval(j);
        w.write_record(["coef", name, &full(fit.theta[j])])?;
        w.write_record(["se", name, &full(fit.se[j])])?;
        w.write_record(["ci_low", name, &full(lo)])?;
        w.write_record(["ci_high", name, &full(hi)])?;
    }
    if let Some(f) = fit.first_stage_f {
        w.write_record(["diagnostic", "instrument_f", &full(f)])?;
    }
    if let Some(d) = diagnostics {
        w.write_record(["diagnostic", "mean_f", &full(d.mean_f)])?;
        w.write_record(["diagnostic", "distributional_f", &full(d.distributional_f)])?;
        w.write_record(["diagnostic", "label", d.label.as_str()])?;
    }
    for warning in &fit.warnings {
        w.write_record(["warning", "", warning])?;
    }
    w.flush().map_err(|e| CliError::io("<estimate csv>", e))
}

pub fn estimate_text(fit: &IvFit) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method: {}   n = {}", fit.method.tag(), fit.n);
    let _ = writeln!(
        out,
        "{:<16} {:>14} {:>14} {:>14} {:>14}",
        "term", "estimate", "std. error", "95% low", "95% high"
    );
    for (j, name) in fit.names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<16} {:>14} {:>14} {:>14} {:>14}",
            name,
            sig6(fit.theta[j]),
            sig6(fit.se[j]),
            sig6(fit.theta[j] - CRITICAL_95 * fit.se[j]),
            sig6(fit.theta[j] + CRITICAL_95 * fit.se[j]),
        );
    }
    if let Some(f) = fit.first_stage_f {
        let _ = writeln!(out, "generated-instrument F: {}", sig6(f));
    }
    for warning in &fit.warnings {
        let _ = writeln!(out, "warning: {warning}");
    }
    out
}

/// Diagnostics CSV: `(statistic, tau, value, df)`.
pub fn write_diagnostics_csv<W: Write>(out: W, d: &DiagnosticsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["statistic", "tau", "value", "df"])?;
    w.write_record(["mean_f", "", &full(d.mean_f), &d.mean_df.to_string()])?;
    for q in &d.quantile_f {
        w.write_record(["quantile_f", &full(q.tau), &full(q.f), &q.df.to_string()])?;
    }
    for q in &d.grid_f {
        w.write_record(["grid_f", &full(q.tau), &full(q.f), &q.df.to_string()])?;
    }
    w.write_record([
        "distributional_f",
        "",
        &full(d.distributional_f),
        &d.distributional_df.to_string(),
    ])?;
    w.write_record(["label", "", d.label.as_str(), ""])?;
    w.flush().map_err(|e| CliError::io("<diagnostics csv>", e))
}

pub fn diagnostics_text(d: &DiagnosticsReport, show_grid: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "n = {}", d.n);
    let _ = writeln!(
        out,
        "mean first-stage F: {} (df {})",
        sig6(d.mean_f),
        d.mean_df
    );
    let _ = writeln!(out, "quantile first-stage F:");
    for q in &d.quantile_f {
        let _ = writeln!(out, "  tau = {:<6} F = {} (df {})", q.tau, sig6(q.f), q.df);
    }
    if show_grid {
        let _ = writeln!(out, "grid first-stage F:");
        for q in &d.grid_f {
            let _ = writeln!(
                out,
                "  tau = {:<6} F = {} (df {})",
                sig6(q.tau),
                sig6(q.f),
                q.df
            );
        }
    }
    let _ = writeln!(
        out,
        "distributional F: {} (df {})",
        sig6(d.distributional_f),
        d.distributional_df
    );
    let _ = writeln!(out, "decision: {}", d.label);
    let _ = writeln!(out, "advice: {}", d.label.advice());
    for note in &d.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}
