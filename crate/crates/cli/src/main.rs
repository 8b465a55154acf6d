//! `gilab`: label-recovery trials, reconstruction attacks, ablations and
//! the gradient self-test against a simulated federated client.

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gilab_core::Error as CoreError;

use spec::{ExperimentSpec, Mode, Overrides, OUT_ROOT_ENV};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ORACLE: u8 = 4;

/// Invalid flags or configuration.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Self-test checks that did not hold; carries their names.
#[derive(Debug)]
pub struct OracleFailure(pub String);

impl std::fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "self-test failed: {}", self.0)
    }
}

impl std::error::Error for OracleFailure {}

#[derive(Parser, Debug)]
#[command(name = "gilab", version, about)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    /// Replay a run from its `config.toml`; other flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to `<mode>-seed<seed>` under the output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,
    /// No per-iteration progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if cause.is::<OracleFailure>() {
            return EXIT_ORACLE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::NonFinite { .. }
                | CoreError::Diverged { .. }
                | CoreError::DegenerateGradient
                | CoreError::Overflow(_) => EXIT_NUMERIC,
                CoreError::InvalidArgument(_) | CoreError::LabelOutOfRange { .. } => EXIT_USAGE,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let base = cli
        .config
        .as_deref()
        .map(ExperimentSpec::load)
        .transpose()?;
    let spec = ExperimentSpec::build(base, &cli.overrides)?;
    if spec.mode == Mode::Selftest {
        return commands::cmd_selftest(spec.seed);
    }
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| cli.out_root.join(spec.default_dir_name()));
    commands::begin_run(&spec, &dir)?;
    match spec.mode {
        Mode::Labels => commands::cmd_labels(&spec, &dir)?,
        Mode::Attack => commands::cmd_attack(&spec, &dir, cli.quiet)?,
        Mode::Ablation => commands::cmd_ablation(&spec, &dir)?,
        Mode::Selftest => unreachable!("handled above"),
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
