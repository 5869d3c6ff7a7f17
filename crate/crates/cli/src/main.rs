mod artifacts;
mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use artifacts::RunDir;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] adjflow::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Threads(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn kind(&self) -> &'static str {
        use adjflow::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::StageFailure { .. } => "stage_failure",
                E::SingularSystem(_) => "singular_system",
                E::DegenerateMapping(_) => "degenerate_mapping",
                E::Domain(_) => "domain",
                E::Contract(_) => "contract",
                E::StepUnderflow { .. } => "step_underflow",
                E::Config(_) => "config",
                E::Evaluation(_) => "evaluation",
                E::Store(_) => "store",
            },
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
            CliError::Threads(_) => "threads",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(adjflow::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "adjflow", version, about = "Discrete adjoint experiments on deforming 1D domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `output.dir` from the config, then `runs/<config stem>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel studies.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Primal solve: checkpoint, QoI history and solution snapshots.
    Simulate(Common),
    /// Adjoint gradients of every QoI plus the dual residual report.
    Adjoint(Common),
    /// Adjoint gradients against fourth-order central differences.
    GradCheck(Common),
    /// Temporal or spatial convergence study.
    OrderStudy(Common),
    /// Freestream preservation with and without the GCL field.
    GclCheck(Common),
    /// Bound- and equality-constrained optimization of the configured objective.
    Optimize(Common),
}

impl Command {
    fn split(&self) -> (&'static str, &Common) {
        match self {
            Command::Simulate(c) => ("simulate", c),
            Command::Adjoint(c) => ("adjoint", c),
            Command::GradCheck(c) => ("grad-check", c),
            Command::OrderStudy(c) => ("order-study", c),
            Command::GclCheck(c) => ("gcl-check", c),
            Command::Optimize(c) => ("optimize", c),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (name, common) = cli.command.split();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (cfg, bytes) = artifacts::read_config(&common.config)?;
    let dir = common.out.clone().or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| {
        let stem = common.config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(stem)
    });
    let mut rd = RunDir::create(dir, artifacts::config_hash(&bytes))?;
    log::info!("{name}: config {} (hash {})", common.config.display(), rd.hash);
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&cfg, &mut rd)?,
        Command::Adjoint(_) => commands::adjoint(&cfg, &mut rd)?,
        Command::GradCheck(_) => commands::grad_check(&cfg, &mut rd)?,
        Command::OrderStudy(_) => commands::order_study(&cfg, &mut rd)?,
        Command::GclCheck(_) => commands::gcl_check(&cfg, &mut rd)?,
        Command::Optimize(_) => commands::optimize(&cfg, &mut rd)?,
    }
    rd.finish(name)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADJFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
