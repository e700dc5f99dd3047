//! File formats and the batch commands behind the `transport` binary.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::parse_terms;
use crate::data::{
    BasisSpec, Diagnostics, EstimateReport, ShiftModel, SourceDataset, TargetSummary,
};
use crate::eb::eb_estimate;
use crate::error::{Error, Result};
use crate::flex::flex_estimate;
use crate::model_check::specification_test;
use crate::simulation::{
    run_monte_carlo, MonteCarloSpec, OutcomeKind, Scenario, SimReport, SimScenario,
};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_solver_failure() {
        EXIT_SOLVER
    } else {
        EXIT_INPUT
    }
}

/// Read individual-level source data. The outcome column is selected by name
/// and every other column becomes a covariate.
pub fn load_source_csv(path: &Path, outcome: &str) -> Result<SourceDataset> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_source_csv(file, outcome)
}

pub fn read_source_csv<R: io::Read>(reader: R, outcome: &str) -> Result<SourceDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv {
            row: 1,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let y_col = headers
        .iter()
        .position(|h| h == outcome)
        .ok_or_else(|| Error::Csv {
            row: 1,
            column: outcome.to_string(),
            message: "outcome column not found in header".into(),
        })?;
    let mut y = Vec::new();
    let mut cells = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 2;
        let rec = rec.map_err(|e| Error::Csv {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for (j, cell) in rec.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Csv {
                    row,
                    column: headers[j].clone(),
                    message: format!("`{cell}` is not a finite number"),
                })?;
            if j == y_col {
                y.push(value);
            } else {
                cells.push(value);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = headers.len() - 1;
    let names = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y_col)
        .map(|(_, h)| h.clone())
        .collect();
    SourceDataset::new(
        y.clone(),
        DMatrix::from_row_slice(y.len(), d, &cells),
        names,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryFile {
    m: usize,
    terms: Vec<String>,
    phi: Vec<f64>,
}

pub fn load_target_summary_json(path: &Path) -> Result<TargetSummary> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_target_summary(&text)
}

pub fn parse_target_summary(text: &str) -> Result<TargetSummary> {
    let file: SummaryFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    for term in &file.terms {
        parse_terms(term).map_err(|e| Error::Schema(format!("term `{term}`: {e}")))?;
    }
    TargetSummary::new(file.phi, file.m, file.terms)
}

pub fn write_target_summary(summary: &TargetSummary) -> String {
    let file = SummaryFile {
        m: summary.m,
        terms: summary.term_labels.clone(),
        phi: summary.phi_hat.clone(),
    };
    serde_json::to_string_pretty(&file).expect("summary serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    EstimateEb,
    EstimateFlex,
    CheckModel,
    Simulate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub source_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
    pub basis_spec: Option<String>,
    pub shift_spec: Option<String>,
    pub outcome_column: String,
    /// Standard output when absent.
    pub output_path: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
    pub scenario: Scenario,
    pub outcome_kind: OutcomeKind,
    pub n: usize,
    pub m: usize,
    pub reps: usize,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            source_path: None,
            summary_path: None,
            basis_spec: None,
            shift_spec: None,
            outcome_column: "y".into(),
            output_path: None,
            seed: 42,
            workers: 1,
            scenario: Scenario::I,
            outcome_kind: OutcomeKind::Continuous,
            n: 500,
            m: 250,
            reps: 1000,
        }
    }
}

fn required<'a, T: ?Sized>(value: Option<&'a T>, flag: &str) -> Result<&'a T> {
    value.ok_or_else(|| Error::Schema(format!("missing required option --{flag}")))
}

struct Inputs {
    data: SourceDataset,
    summary: TargetSummary,
    basis: BasisSpec,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let data = load_source_csv(
        required(cfg.source_path.as_deref(), "source")?,
        &cfg.outcome_column,
    )?;
    let summary = load_target_summary_json(required(cfg.summary_path.as_deref(), "summary")?)?;
    let basis = match &cfg.basis_spec {
        Some(spec) => BasisSpec::parse(spec)?,
        None => BasisSpec::parse(&summary.term_labels.join(" + "))?,
    };
    Ok(Inputs {
        data,
        summary,
        basis,
    })
}

fn shift_model(cfg: &RunConfig) -> Result<ShiftModel> {
    ShiftModel::parse(required(cfg.shift_spec.as_deref(), "shift")?)
}

fn write_output(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, contents).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(contents.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn sim_report_csv(report: &SimReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scenario",
        "outcome",
        "n",
        "m",
        "reps",
        "estimator",
        "bias",
        "sd",
        "mean_se",
        "coverage",
        "failed",
    ])
    .expect("in-memory write");
    let c = &report.config;
    for row in &report.rows {
        w.write_record([
            c.scenario.id().to_string(),
            c.outcome.as_str().to_string(),
            c.n.to_string(),
            c.m.to_string(),
            c.reps.to_string(),
            row.estimator.as_str().to_string(),
            row.bias.to_string(),
            row.sd.to_string(),
            row.mean_se.to_string(),
            row.coverage.to_string(),
            row.failed.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Execute one command. Warnings go to standard error.
pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command {
        Command::EstimateEb => {
            let inp = load_inputs(cfg)?;
            let fit = eb_estimate(&inp.data, &inp.basis, &inp.summary)?;
            let report = EstimateReport::new(
                fit.mu,
                fit.se,
                inp.data.n(),
                inp.summary.m,
                "eb",
                Diagnostics::from_weights(&fit.p, &fit.report),
            );
            write_output(cfg.output_path.as_deref(), &to_json(&report))
        }
        Command::EstimateFlex => {
            let inp = load_inputs(cfg)?;
            let model = shift_model(cfg)?;
            let fit = flex_estimate(&inp.data, &model, &inp.basis, &inp.summary)?;
            if fit.variance_reduction_negative {
                eprintln!("warning: plug-in variance reduction term is negative");
            }
            let report = EstimateReport::new(
                fit.mu,
                fit.se,
                inp.data.n(),
                inp.summary.m,
                "flex",
                Diagnostics::from_weights(&fit.q, &fit.report),
            );
            write_output(cfg.output_path.as_deref(), &to_json(&report))
        }
        Command::CheckModel => {
            let inp = load_inputs(cfg)?;
            let model = shift_model(cfg)?;
            let fit = flex_estimate(&inp.data, &model, &inp.basis, &inp.summary)?;
            let result = specification_test(&fit, &inp.data, &model, &inp.basis, &inp.summary)?;
            if result.df == 0 {
                eprintln!("warning: the model is just identified (df = 0); the test has no power");
            }
            write_output(cfg.output_path.as_deref(), &to_json(&result))
        }
        Command::Simulate => {
            let sim = SimScenario {
                scenario: cfg.scenario,
                outcome: cfg.outcome_kind,
                n: cfg.n,
                m: cfg.m,
                reps: cfg.reps,
                seed: cfg.seed,
            };
            let mut spec = MonteCarloSpec::standard(cfg.scenario);
            if let Some(b) = &cfg.basis_spec {
                spec = spec.with_basis(b)?;
            }
            if let Some(s) = &cfg.shift_spec {
                spec = spec.with_model(s)?;
            }
            let report = run_monte_carlo(&sim, &spec, cfg.workers)?;
            if report.unstable {
                eprintln!(
                    "warning: unstable configuration ({} of {} replications failed)",
                    report.reps_failed, sim.reps
                );
            }
            let csv = sim_report_csv(&report);
            match &cfg.output_path {
                Some(p) => {
                    write_output(Some(p), &csv)?;
                    write_output(Some(&p.with_extension("json")), &to_json(&report))
                }
                None => {
                    let mut out = BufWriter::new(io::stdout().lock());
                    out.write_all(csv.as_bytes())?;
                    out.flush()?;
                    Ok(())
                }
            }
        }
    }
}
