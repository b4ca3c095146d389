//! `flowlens`: simulate, ensemble, probe, retrieve, agent-run, report,
//! evaluate and train-projector.
//!
//! Exit codes: 0 ok, 1 usage, 2 config, 3 runtime, 4 physics failure (the
//! critic rejected the output or the agent episode ended failed).

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    PhysicsFailure,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::PhysicsFailure => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "flowlens", version, about = "Grounded flow simulation, probing and reporting", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides for config file values.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat TOML config file (`include = [...]` pulls in other files).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; every output and `manifest.json` go here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grid size (square).
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// taylor_green, vortex_pair or random.
    #[arg(long, global = true)]
    initial: Option<String>,
    #[arg(long, global = true)]
    amplitude: Option<f64>,
    #[arg(long, global = true)]
    viscosity: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    steps_per_output: Option<usize>,
    #[arg(long, global = true)]
    outputs: Option<usize>,
    #[arg(long, global = true)]
    members: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    #[arg(long, global = true)]
    r_max: Option<usize>,
    /// scripted:golden, scripted:<actions.json>, remote or remote:<url>.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// hashing, remote or remote:<url>.
    #[arg(long, global = true)]
    embedder: Option<String>,
    #[arg(long, global = true)]
    knowledge_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    projector: Option<PathBuf>,
    /// Inject a divergent velocity error: first (first simulate call) or always.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "first")]
    inject_fault: Option<String>,
    #[arg(long, global = true)]
    fault_amplitude: Option<f64>,
    #[arg(long, global = true)]
    pressure_unit: Option<String>,
    /// Skip PNG plots.
    #[arg(long, global = true)]
    no_png: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Deterministic rollout of the initial condition.
    Simulate,
    /// Perturbed ensemble with mean and spread.
    Ensemble,
    /// Counterfactual intervention and causal sensitivity.
    Probe(ProbeArgs),
    /// Top-k knowledge retrieval.
    Retrieve(RetrieveArgs),
    /// Critic-gated agent episode with report.
    AgentRun,
    /// Re-render report.md from a report.json sidecar.
    Report(ReportArgs),
    /// RMSE/SSIM/PSNR of a predicted trajectory against a reference.
    Evaluate(EvaluateArgs),
    /// Train the projector on the synthetic descriptor set.
    TrainProjector,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long, default_value = "vorticity")]
    pub channel: String,
    #[arg(long, conflicts_with_all = ["add", "zero"])]
    pub scale: Option<f64>,
    #[arg(long, conflicts_with = "zero")]
    pub add: Option<f64>,
    #[arg(long)]
    pub zero: bool,
    /// Cell box `row0,col0,rows,cols`; the whole field if omitted.
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long, default_value = "probe")]
    pub label: String,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    pub query: String,
    /// phy, prot or hist; all partitions if omitted.
    #[arg(long)]
    pub partition: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// report.json written by agent-run.
    #[arg(long)]
    pub from: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of step_NNNN_<channel>.bin files.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value = "vorticity")]
    pub channel: String,
    #[arg(long)]
    pub data_range: Option<f64>,
}

fn apply_flags(c: Common, cfg: &mut RunConfig) {
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = c.$field { cfg.$field = v; })*};
    }
    set!(
        out,
        seed,
        grid,
        initial,
        amplitude,
        viscosity,
        dt,
        steps_per_output,
        outputs,
        members,
        lambda,
        delta,
        max_steps,
        r_max,
        policy,
        embedder,
        inject_fault,
        fault_amplitude,
        pressure_unit
    );
    if c.knowledge_dir.is_some() {
        cfg.knowledge_dir = c.knowledge_dir;
    }
    if c.projector.is_some() {
        cfg.projector = c.projector;
    }
    if c.no_png {
        cfg.png = false;
    }
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    let config_path = cli.common.config.clone();
    apply_flags(cli.common, &mut cfg);
    let ctx = commands::Context::new(cfg, config_path)?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Ensemble => commands::ensemble(&ctx),
        Command::Probe(a) => commands::probe(&ctx, &a),
        Command::Retrieve(a) => commands::retrieve(&ctx, &a),
        Command::AgentRun => commands::agent_run(&ctx),
        Command::Report(a) => commands::report(&ctx, &a),
        Command::Evaluate(a) => commands::evaluate(&ctx, &a),
        Command::TrainProjector => commands::train_projector(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(o) => ExitCode::from(o.code() as u8),
        Err(e) => {
            eprintln!("flowlens: {e}");
            ExitCode::from(e.code())
        }
    }
}
