use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use sehilo::HiLoConfig;
use sehilo_cli::commands::{forward, hilo_noise, mc, roundtrip, sweep, theory};
use sehilo_cli::config::{RunConfig, SEED_ENV};
use sehilo_cli::output::write_csv;

/// Exit status when a run completed but one of its checks failed.
const CHECK_FAILED: u8 = 2;

#[derive(Parser)]
#[command(name = "sehilo", version, about = "Noise-resilience experiments for the HiLo FSQ codec")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (falls back to the config, then SEHILO_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; CSV and reports go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trial count: MC trials, sweep draws per image, or fuzzed frames.
    #[arg(long, global = true)]
    trials: Option<u64>,
    /// Use the 256 + 256 channel model instead of the desk-scale default.
    #[arg(long, global = true)]
    paper_model: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form recovery probabilities.
    Theory,
    /// Monte Carlo check of the closed form; fails if an interior row is off by more than 4 stderr.
    Mc,
    /// Pipeline SNR sweep with a noiseless control and a fixed-sigma alpha comparison.
    Sweep,
    /// Independent Hi / Lo channel SNR grid.
    HiloNoise,
    /// Fuzz the frame codec and compare the golden frame.
    Roundtrip,
    /// Run the pipeline on one tensor file.
    Forward {
        /// Input tensor file.
        input: PathBuf,
        /// Stats JSON path; defaults to the output path with a `.json` extension.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit<R: Serialize>(path: Option<&Path>, rows: &[R]) -> Result<()> {
    write_csv(output(path)?, rows)
}

fn report(violations: &[String]) -> bool {
    for v in violations {
        eprintln!("check failed: {v}");
    }
    violations.is_empty()
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.paper_model {
        cfg.model = HiLoConfig { d_fsq: cfg.model.d_fsq, ..HiLoConfig::paper() };
    }
    if let Some(p) = cli.out {
        cfg.out = Some(p);
    }
    if let Some(n) = cli.trials {
        match cli.command {
            Command::Mc => cfg.mc.trials = n,
            Command::Sweep | Command::HiloNoise => cfg.sweep.draws = n.try_into()?,
            Command::Roundtrip => cfg.roundtrip.frames = n,
            Command::Theory | Command::Forward { .. } => {}
        }
    }
    cfg.validate()?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = cfg.resolve_seed(cli.seed, env.as_deref())?;
    let out = cfg.out.as_deref();

    match &cli.command {
        Command::Theory => {
            let rows = theory::run(&cfg)?;
            emit(out, &rows)?;
            Ok(report(&theory::violations(&rows)))
        }
        Command::Mc => {
            let rows = mc::run(&cfg, seed)?;
            emit(out, &rows)?;
            let failed: Vec<String> = rows
                .iter()
                .filter(|r| !r.pass)
                .map(|r| {
                    format!(
                        "{} sampling at sigma {}: empirical {} vs theory {} (z = {:.2})",
                        r.sampling,
                        r.sigma,
                        r.empirical,
                        r.theory,
                        r.z()
                    )
                })
                .collect();
            Ok(report(&failed))
        }
        Command::Sweep => {
            let rows = sweep::run(&cfg, seed)?;
            emit(out, &rows)?;
            Ok(report(&sweep::violations(&rows, mc::Z_TOLERANCE)))
        }
        Command::HiloNoise => {
            let rows = hilo_noise::run(&cfg, seed)?;
            emit(out, &rows)?;
            Ok(report(&hilo_noise::violations(&rows, mc::Z_TOLERANCE)))
        }
        Command::Roundtrip => {
            let r = roundtrip::run(&cfg, seed)?;
            write!(output(out)?, "{r}")?;
            Ok(r.passed())
        }
        Command::Forward { input, stats } => {
            let Some(recon) = out else {
                bail!("forward needs an output path (--out or \"out\" in the config)");
            };
            let stats_path = stats.clone().unwrap_or_else(|| recon.with_extension("json"));
            let s = forward::run(&cfg, input, recon, &stats_path, seed)?;
            eprintln!(
                "wrote {} and {}; symbol accuracy hi {} lo {}",
                recon.display(),
                stats_path.display(),
                s.hi.symbol_accuracy,
                s.lo.symbol_accuracy
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
