use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use thrustwalk_core::harness::{
    load_config, run_simulation, run_sweep, write_outputs, ConfigError, SimConfig, Summary, SweepRange, Termination,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_FALL: u8 = 4;

#[derive(Parser)]
#[command(name = "thrustwalk", version, about = "Thruster-assisted biped walking and jumping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trajectory and summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Simulated time in seconds, overriding the config.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write frames.svg and timeseries.svg.
        #[arg(long)]
        emit_svg: bool,
    },
    /// Parse and check a configuration without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the scenario for evenly spaced values of one numeric key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=start:end:count`, e.g. `gains.com_kp.2=80:120:5`.
        #[arg(long)]
        param: String,
        /// Write sweep.json here instead of printing to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config problems map to their own exit code; everything else is generic.
#[derive(Debug)]
enum Failure {
    Config(ConfigError),
    Other(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn apply_overrides(mut cfg: SimConfig, duration: Option<f64>, seed: Option<u64>) -> Result<SimConfig, ConfigError> {
    if let Some(d) = duration {
        cfg.sim.duration = Some(d);
    }
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(t: &Termination) -> u8 {
    match t {
        Termination::Completed => 0,
        Termination::Diverged { .. } => EXIT_NUMERICAL,
        Termination::Fell { .. } => EXIT_FALL,
    }
}

fn simulate(config: &Path, out: Option<PathBuf>, duration: Option<f64>, seed: Option<u64>, emit_svg: bool) -> Result<u8, Failure> {
    let cfg = apply_overrides(load_config(config)?, duration, seed)?;
    let dir = out.or_else(|| cfg.sim.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    log::info!("simulating {:.2} s ({} control ticks)", cfg.duration(), cfg.ticks());
    let log = run_simulation(&cfg);
    let paths = write_outputs(&log, &cfg.obstacles, &dir, emit_svg).context("writing outputs")?;
    let summary = Summary::new(&log, &cfg.obstacles);
    println!("{}", serde_json::to_string_pretty(&summary).context("encoding summary")?);
    log::info!("wrote {} and {}", paths.csv.display(), paths.summary.display());
    match &log.termination {
        Termination::Completed => {}
        Termination::Fell { time, height } => log::error!("fell at t = {time:.3} s (body height {height:.3} m)"),
        Termination::Diverged { time, reason } => log::error!("numerical failure at t = {time:.3} s: {reason}"),
    }
    Ok(exit_for(&log.termination))
}

fn sweep(config: &Path, param: &str, out: Option<PathBuf>) -> Result<u8, Failure> {
    let cfg = load_config(config)?;
    let range = SweepRange::parse(param)?;
    log::info!("sweeping {} over {} values", range.key, range.count);
    let points = run_sweep(&cfg, &range)?;
    let json = serde_json::to_string_pretty(&points).context("encoding sweep")?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("sweep.json");
            std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        }
        None => println!("{json}"),
    }
    for p in &points {
        log::info!("{} = {}: {:?}", p.key, p.value, p.summary.termination);
    }
    Ok(points.iter().map(|p| exit_for(&p.summary.termination)).max().unwrap_or(0))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, duration, seed, emit_svg } => simulate(&config, out, duration, seed, emit_svg),
        Command::Validate { config } => load_config(&config).map(|cfg| {
            println!("ok: {:.2} s, {} phases, {} control ticks", cfg.duration(), cfg.gait.phases.len(), cfg.ticks());
            0
        }).map_err(Failure::from),
        Command::Sweep { config, param, out } => sweep(&config, &param, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
