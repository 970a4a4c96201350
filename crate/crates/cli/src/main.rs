use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fsgt_core::pipeline::{cmd_audit, cmd_bridge, cmd_fit, cmd_probe, cmd_synth, RunConfig};
use fsgt_core::Error;

/// Thresholded cascade probe over saved training-field snapshots.
#[derive(Parser, Debug)]
#[command(name = "fsgt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic snapshot family.
    Synth(Args),
    /// Run the cascade probe over every snapshot and enabled null variant.
    Probe(Args),
    /// Per-step scaling fits, window summaries and the figure summary.
    Fit(Args),
    /// External-metric exponents and correlation tables.
    Bridge(Args),
    /// Recompute derived files and compare them with what is on disk.
    Audit(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Defaults to `out` next to the config file; for
    /// `synth` it replaces the snapshot root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite existing outputs and ignore config-hash mismatches.
    #[arg(long)]
    force: bool,
}

fn load(args: &Args) -> Result<RunConfig, Error> {
    let mut config = RunConfig::load(&args.config)?;
    config.apply_env_overrides();
    if let Some(jobs) = args.jobs {
        config.jobs = jobs;
    }
    Ok(config)
}

fn out_dir(args: &Args) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        args.config
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("out")
    })
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Synth(args) => {
            let config = load(&args)?;
            let root = args.out.clone().unwrap_or_else(|| config.snapshot_root.clone());
            let written = cmd_synth(&config, &root, args.force)?;
            log::info!("synth: wrote {} snapshots under {}", written.len(), root.display());
        }
        Command::Probe(args) => {
            let config = load(&args)?;
            let outcome = cmd_probe(&config, &out_dir(&args), args.force)?;
            log::info!(
                "probe: {} computed, {} reused, {} errors",
                outcome.computed,
                outcome.reused,
                outcome.errors
            );
            if outcome.errors > 0 {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Fit(args) => {
            let config = load(&args)?;
            cmd_fit(&config, &out_dir(&args))?;
        }
        Command::Bridge(args) => {
            let config = load(&args)?;
            let report = cmd_bridge(&config, &out_dir(&args))?;
            log::info!("bridge: {} correlation rows", report.rows.len());
        }
        Command::Audit(args) => {
            let config = load(&args)?;
            let report = cmd_audit(&config, &out_dir(&args))?;
            for e in &report.entries {
                println!("{} ok", e.file);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("fsgt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
