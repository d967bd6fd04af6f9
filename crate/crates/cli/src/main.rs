use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qsd_cli::commands::{self, Outcome};
use qsd_cli::config::{self, Output, RunConfig, SeedSource, SEED_ENV};
use qsd_core::{Result, Scheme};

/// Quantum trajectories of a heterodyne-monitored decaying qubit.
#[derive(Parser)]
#[command(name = "qsd", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set params.eta=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RecordInputs {
    /// Take gamma1, gamma_phi, eta and dt from each record header instead
    /// of the configuration.
    #[arg(long)]
    params_from_record: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an ensemble and write the configured outputs.
    Simulate(Common),
    /// Reconstruct trajectories from record files.
    Filter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: RecordInputs,
        /// Integration scheme, overriding `scheme`.
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Check the closed-form invariants on record files.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: RecordInputs,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Maximum-likelihood efficiency from record files, or from a
    /// synthesized ensemble when none are given.
    EstimateEta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: RecordInputs,
        files: Vec<PathBuf>,
    },
    /// Simulated tomography against the filter's predictions.
    Validate(Common),
    /// Bloch-space occupancy histograms.
    Grid(Common),
}

fn load(common: &Common) -> Result<(RunConfig, SeedSource)> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let (mut cfg, src) = config::load(common.config.as_deref(), &common.overrides, env_seed.as_deref())?;
    if let Some(dir) = &common.out_dir {
        cfg.output_dir = dir.clone();
    }
    Ok((cfg, src))
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Simulate(c) => {
            let (cfg, src) = load(&c)?;
            if let Some(w) = cfg.params.stiffness_warning() {
                eprintln!("warning: {w}");
            }
            commands::simulate(&cfg, src, &cfg.outputs, "simulate")
        }
        Command::Filter { common, inputs, scheme, files } => {
            let (mut cfg, src) = load(&common)?;
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            commands::filter_records(&cfg, src, &files, inputs.params_from_record)
        }
        Command::Analyze { common, inputs, files } => {
            let (cfg, src) = load(&common)?;
            commands::analyze(&cfg, src, &files, inputs.params_from_record)
        }
        Command::EstimateEta { common, inputs, files } => {
            let (cfg, src) = load(&common)?;
            commands::estimate(&cfg, src, &files, inputs.params_from_record)
        }
        Command::Validate(c) => {
            let (cfg, src) = load(&c)?;
            commands::simulate(&cfg, src, &BTreeSet::from([Output::Tomography]), "validate")
        }
        Command::Grid(c) => {
            let (cfg, src) = load(&c)?;
            commands::simulate(&cfg, src, &BTreeSet::from([Output::Grid]), "grid")
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot start {n} worker threads");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.manifest_path.display());
            for c in outcome.manifest.failed_checks() {
                eprintln!("check failed: {}: {}", c.name, c.detail);
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
