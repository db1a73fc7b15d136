//! `moncap`: configuration-driven driver for capacity solves, s-sweeps,
//! property suites, convergence studies and flux checks.
//!
//! Exit codes: 0 success, 1 failed suite/study/check or runtime error,
//! 2 bad configuration, 3 solver divergence.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use moncap::io::{append_ledger, config_hash};
use serde_json::json;

use commands::{CliError, Outcome, Status};
use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "moncap", version, about = "Discrete nonlinear capacities for monotone fluxes")]
struct Cli {
    /// Worker threads for parallel suites (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output`, else `moncap-out`).
    #[arg(long, global = true, env = "MONCAP_OUT")]
    out: Option<PathBuf>,
    /// Override the solver residual tolerance.
    #[arg(long = "tol-res", global = true)]
    tol_res: Option<f64>,
    /// Do not print results to stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Capacity report by all three formulas, with bound checks.
    Capacity { config: PathBuf },
    /// Solve for the potential and dump the field.
    Potential {
        config: PathBuf,
        /// Write `potential.csv` (x,y,u per node).
        #[arg(long)]
        csv: bool,
        /// Write `potential.pgm` (8-bit grayscale).
        #[arg(long)]
        pgm: bool,
    },
    /// Capacity along an ascending s-grid.
    SweepS { config: PathBuf },
    /// Run a randomized property suite.
    Suite {
        config: PathBuf,
        /// order, subadditivity, bounds, s-laws, invariance or comparison.
        #[arg(long)]
        name: String,
    },
    /// Grid convergence against an oracle value.
    Converge { config: PathBuf },
    /// Randomized check of the flux structure conditions.
    CheckFlux {
        config: PathBuf,
        /// Check every shipped flux instead of the configured one.
        #[arg(long)]
        shipped: bool,
    },
    /// Reference capacities without a mesh.
    Oracle {
        #[command(subcommand)]
        kind: OracleCommand,
    },
}

#[derive(Subcommand, Debug)]
enum OracleCommand {
    /// Annulus `r < |x| < R`; closed form, or 1-D numeric with `--flux`.
    Radial {
        #[arg(long, default_value_t = 2)]
        dim: u32,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        r: f64,
        #[arg(long = "R")]
        big_r: f64,
        /// Isotropic flux as a JSON flux spec.
        #[arg(long)]
        flux: Option<String>,
        #[arg(long, default_value_t = 20_000)]
        panels: usize,
    },
    /// Slab `x <= a` inside `x < b` of height `ly`.
    Strip {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 1.0)]
        ly: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Capacity { .. } => "capacity",
            Command::Potential { .. } => "potential",
            Command::SweepS { .. } => "sweep-s",
            Command::Suite { .. } => "suite",
            Command::Converge { .. } => "converge",
            Command::CheckFlux { .. } => "check-flux",
            Command::Oracle { .. } => "oracle",
        }
    }

    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Capacity { config }
            | Command::Potential { config, .. }
            | Command::SweepS { config }
            | Command::Suite { config, .. }
            | Command::Converge { config }
            | Command::CheckFlux { config, .. } => Some(config),
            Command::Oracle { .. } => None,
        }
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.tol_res {
        cfg.solver.tol_res = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("moncap-out"))
}

/// Runs the command; returns the outcome plus the hashed description of the run.
fn dispatch(cli: &Cli) -> Result<(Outcome, String, PathBuf), CliError> {
    let cfg = cli.command.config_path().map(|p| load_config(cli, p)).transpose()?;
    let out = output_dir(cli, cfg.as_ref());
    let hash_input = match (&cli.command, &cfg) {
        (Command::Suite { name, .. }, Some(cfg)) => json!({ "config": cfg, "suite": name }),
        (Command::Oracle { kind }, _) => json!({ "oracle": format!("{kind:?}") }),
        (_, Some(cfg)) => json!({ "config": cfg }),
        (_, None) => json!(null),
    };
    let hash = config_hash(&hash_input)?;
    let outcome = match (&cli.command, cfg.as_ref()) {
        (Command::Capacity { .. }, Some(cfg)) => commands::capacity(cfg, &out)?,
        (Command::Potential { csv, pgm, .. }, Some(cfg)) => commands::potential(cfg, &out, *csv, *pgm)?,
        (Command::SweepS { .. }, Some(cfg)) => commands::sweep(cfg, &out)?,
        (Command::Suite { name, .. }, Some(cfg)) => commands::suite(cfg, name, &out)?,
        (Command::Converge { .. }, Some(cfg)) => commands::converge(cfg, &out)?,
        (Command::CheckFlux { shipped, .. }, Some(cfg)) => commands::check_flux(cfg, *shipped, &out)?,
        (Command::Oracle { kind }, _) => match kind {
            OracleCommand::Radial { dim, p, r, big_r, flux, panels } => {
                commands::oracle_radial(*dim, *p, *r, *big_r, flux.as_deref(), *panels)?
            }
            OracleCommand::Strip { p, a, b, ly } => commands::oracle_strip(*p, *a, *b, *ly)?,
        },
        _ => unreachable!("every config command loads its config"),
    };
    Ok((outcome, hash, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("moncap: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let start = Instant::now();
    let (outcome, hash, out) = match dispatch(&cli) {
        Ok(v) => v,
        Err(err) => {
            let (code, msg) = match &err {
                CliError::Config(m) => (2, format!("bad config: {m}")),
                CliError::Diverged(m) => (3, m.clone()),
                CliError::Runtime(m) => (1, m.clone()),
            };
            eprintln!("moncap: {msg}");
            return ExitCode::from(code);
        }
    };
    if !cli.quiet {
        match serde_json::to_string_pretty(&outcome.output) {
            Ok(text) => println!("{text}"),
            Err(e) => eprintln!("moncap: {e}"),
        }
    }
    let code: u8 = match outcome.status {
        Status::Ok => 0,
        Status::Failed => 1,
        Status::Diverged => 3,
    };
    let entry = json!({
        "config_hash": hash,
        "command": cli.command.name(),
        "results": outcome.summary,
        "exit_code": code,
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    if let Err(e) = append_ledger(&out.join("ledger.jsonl"), &entry) {
        eprintln!("moncap: cannot append to ledger: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}
