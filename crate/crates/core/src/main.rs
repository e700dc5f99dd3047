use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transport_core::cli::{exit_code, run, Command, RunConfig, EXIT_INPUT};
use transport_core::simulation::{OutcomeKind, Scenario};

#[derive(Parser)]
#[command(
    name = "transport",
    version,
    about = "Transport an outcome mean to a target population described by covariate summaries"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct EstimateArgs {
    /// Source microdata (CSV with header).
    #[arg(long)]
    source: PathBuf,
    /// Target summary (JSON with m, terms, phi).
    #[arg(long)]
    summary: PathBuf,
    /// Balancing basis, e.g. "x1 + x2 + x1^2". Defaults to the summary terms.
    #[arg(long)]
    basis: Option<String>,
    /// Outcome column in the source file.
    #[arg(long, default_value = "y")]
    outcome: String,
    /// Output file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct FlexArgs {
    #[command(flatten)]
    common: EstimateArgs,
    /// Shift model terms, e.g. "x1 + x2 + x1:x2".
    #[arg(long)]
    shift: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, value_parser = parse_outcome, default_value = "continuous")]
    outcome: OutcomeKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, env = "TRANSPORT_WORKERS")]
    workers: Option<usize>,
    /// Override the balancing basis.
    #[arg(long)]
    basis: Option<String>,
    /// Override the scenario's shift model.
    #[arg(long)]
    shift: Option<String>,
    /// CSV output; a JSON twin is written next to it.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Entropy-balancing estimate.
    EstimateEb(EstimateArgs),
    /// Flexible model-based reweighting estimate.
    EstimateFlex(FlexArgs),
    /// Over-identification test of the shift model.
    CheckModel(FlexArgs),
    /// Monte Carlo study on the simulated superpopulation.
    Simulate(SimulateArgs),
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: transport_core::Error| e.to_string())
}

fn parse_outcome(s: &str) -> Result<OutcomeKind, String> {
    s.parse().map_err(|e: transport_core::Error| e.to_string())
}

fn estimate_config(command: Command, a: EstimateArgs) -> RunConfig {
    let mut cfg = RunConfig::new(command);
    cfg.source_path = Some(a.source);
    cfg.summary_path = Some(a.summary);
    cfg.basis_spec = a.basis;
    cfg.outcome_column = a.outcome;
    cfg.output_path = a.output;
    cfg
}

fn flex_config(command: Command, a: FlexArgs) -> RunConfig {
    let mut cfg = estimate_config(command, a.common);
    cfg.shift_spec = Some(a.shift);
    cfg
}

fn config(cli: Cli) -> Result<RunConfig, String> {
    Ok(match cli.command {
        Cmd::EstimateEb(a) => estimate_config(Command::EstimateEb, a),
        Cmd::EstimateFlex(a) => flex_config(Command::EstimateFlex, a),
        Cmd::CheckModel(a) => flex_config(Command::CheckModel, a),
        Cmd::Simulate(a) => {
            let mut cfg = RunConfig::new(Command::Simulate);
            cfg.scenario = a.scenario;
            cfg.outcome_kind = a.outcome;
            cfg.n = a.n;
            cfg.m = a.m;
            cfg.reps = a.reps;
            cfg.seed = a.seed;
            cfg.workers = match a.workers {
                Some(0) => return Err("--workers must be positive".into()),
                Some(w) => w,
                None => std::thread::available_parallelism().map_or(1, |n| n.get()),
            };
            cfg.basis_spec = a.basis;
            cfg.shift_spec = a.shift;
            cfg.output_path = a.output;
            cfg
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match config(cli) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_INPUT as u8);
        }
    };
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
