//! checkmate-sim: build worlds from config files, run them over either
//! transport, inject failures, verify trainer/shadow equality, and evaluate
//! the checkpoint cost model.
//!
//! Exit codes are stable: 0 success, 2 configuration error, 3 runtime
//! invariant violation, 4 unrecoverable failure.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::anyhow;
use clap::{Parser, Subcommand};

use commands::{config_err, CliResult};
use config::{Mode, RunConfig, SCENARIOS};

#[derive(Parser)]
#[command(name = "checkmate-sim", version, about = "Per-iteration checkpointing emulator")]
struct Cli {
    /// Config file (TOML); the schema depends on the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for logs and CSVs (default "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config's transport.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training scenario end to end and write its logs.
    Run {
        /// Bundled scenario name (smoke, two-groups, million-param, recovery-drill).
        #[arg(long, conflicts_with = "config")]
        scenario: Option<String>,
        /// Override the config's iteration count.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Byte-compare trainer and shadow state, live or against a finished run.
    Verify {
        #[arg(long, conflicts_with = "config")]
        scenario: Option<String>,
        /// Finished run directory to replay against a fresh control run.
        #[arg(long, conflicts_with_all = ["scenario", "config"])]
        run_dir: Option<PathBuf>,
        /// Seed a fault: flip the shard's BYTE-th owned parameter byte
        /// (SHARD:BYTE) after the first iteration.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Inject scheduled failures and prove recovery equals the control run.
    Inject {
        #[arg(long, conflicts_with = "config")]
        scenario: Option<String>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate the wasted-GPU-time model for one parameter set.
    Cost {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Sweep a cost-model axis and write the curve as CSV.
    Sweep {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Print the FLOPs breakdown and derived times for a model shape.
    Flops {
        #[arg(long)]
        preset: Option<String>,
    },
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("CHECKMATE_SIM_LOG", "warn"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {:#}", e.err);
        std::process::exit(e.code);
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.cmd {
        Cmd::Run { scenario, iterations } => {
            let cfg = resolve_run_config(&cli, scenario.as_deref(), *iterations)?;
            commands::cmd_run(&cfg, &resolve_out(&cli, &cfg))
        }
        Cmd::Verify { scenario, run_dir, corrupt, iterations } => {
            if let Some(dir) = run_dir {
                return commands::cmd_verify(None, Some(dir), None, &out);
            }
            let cfg = resolve_run_config(&cli, scenario.as_deref(), *iterations)?;
            let out = resolve_out(&cli, &cfg);
            commands::cmd_verify(Some(&cfg), None, corrupt.as_deref(), &out)
        }
        Cmd::Inject { scenario, iterations } => {
            let cfg = resolve_run_config(&cli, scenario.as_deref(), *iterations)?;
            commands::cmd_inject(&cfg, &resolve_out(&cli, &cfg))
        }
        Cmd::Cost { preset } => commands::cmd_cost(preset.as_deref(), cli.config.as_deref(), &out),
        Cmd::Sweep { preset } => {
            commands::cmd_sweep(preset.as_deref(), cli.config.as_deref(), &out)
        }
        Cmd::Flops { preset } => {
            commands::cmd_flops(preset.as_deref(), cli.config.as_deref(), &out)
        }
    }
}

/// Config file, bundled scenario, or the smoke default, with flag overrides.
fn resolve_run_config(
    cli: &Cli,
    scenario: Option<&str>,
    iterations: Option<u64>,
) -> CliResult<RunConfig> {
    let mut cfg = match (&cli.config, scenario) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                config_err(anyhow!("reading {}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| config_err(anyhow!("parsing {}: {e}", path.display())))?
        }
        (None, Some(name)) => config::scenario(name).ok_or_else(|| {
            config_err(anyhow!(
                "unknown scenario {name:?}; available: {}",
                SCENARIOS.join(", ")
            ))
        })?,
        (None, None) => {
            log::info!("no config or scenario given; running the smoke scenario");
            RunConfig::default()
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    if let Some(iters) = iterations {
        cfg.iterations = iters;
    }
    cfg.validate().map_err(|m| config_err(anyhow!(m)))?;
    Ok(cfg)
}

/// --out beats the config's `out`; both beat the "out" default.
fn resolve_out(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
