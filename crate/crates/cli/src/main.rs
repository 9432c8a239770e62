use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plp_cli::config::{ControllerKind, ExperimentConfig};
use plp_cli::harness::{self, HarnessError};
use plp_cli::scenario::Scenario;

#[derive(Parser)]
#[command(name = "plp", version, about = "Pattern-learning predictive control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Zero every timing column so outputs are byte-reproducible.
    #[arg(long)]
    no_wall_clock: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controller on one seed.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Controller to run; the first configured one by default.
        #[arg(long, value_enum)]
        controller: Option<Kind>,
        /// Feed the realised modes instead of identifying them.
        #[arg(long)]
        true_modes: bool,
    },
    /// Run all configured controllers on shared realisations.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Single seed (overrides the config's list).
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed range `n..m` (half-open).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        true_modes: bool,
    },
    /// Closed-form pattern statistics against the Monte Carlo oracle.
    PatternStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        oracle_trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthesise every mode's response and check it.
    SlsCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Kind {
    Plp,
    BaselineSls,
    RobustSls,
}

impl From<Kind> for ControllerKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Plp => ControllerKind::Plp,
            Kind::BaselineSls => ControllerKind::BaselineSls,
            Kind::RobustSls => ControllerKind::RobustSls,
        }
    }
}

fn parse_range(s: &str) -> Result<Vec<u64>, HarnessError> {
    let bad = || HarnessError::Config(plp_cli::ConfigError::Invalid(format!("seed range `{s}` is not `n..m`")));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if b <= a {
        return Err(bad());
    }
    Ok((a..b).collect())
}

fn load(common: &Common) -> Result<(ExperimentConfig, Option<PathBuf>), HarnessError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if common.no_wall_clock {
        config.wall_clock = false;
    }
    let out = common.out.clone().or_else(|| config.output_dir.clone());
    Ok((config, out))
}

fn emit(out: Option<&PathBuf>, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
    match out {
        Some(dir) => harness::write_file(&dir.join(name), bytes),
        None => {
            print!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate {
            common,
            seed,
            controller,
            true_modes,
        } => {
            let (config, out) = load(&common)?;
            let scenario = Scenario::build(&config)?;
            let kind = controller.map(Into::into).unwrap_or(config.controllers[0]);
            let real = scenario.realize(seed)?;
            let run = harness::run_single(&scenario, &real, kind, true_modes)?;
            let stem = format!("{}_seed{seed}", kind.name());
            emit(out.as_ref(), &format!("{stem}.csv"), &harness::step_csv(&run)?)?;
            if out.is_some() {
                emit(out.as_ref(), &format!("{stem}_provenance.csv"), &harness::provenance_csv(&run)?)?;
            }
            let m = &run.metrics;
            eprintln!(
                "{}: effort {:.4}, peak post-switch {:.4}, {} syntheses ({:.2} ms), {} switches",
                m.controller, m.effort, m.peak_post_switch, m.synth_count, m.synth_ms, m.switches
            );
            if let Some(e) = run.error {
                return Err(HarnessError::Runtime {
                    controller: kind.name(),
                    seed,
                    error: e,
                });
            }
            Ok(())
        }
        Command::Compare {
            common,
            seed,
            seeds,
            true_modes,
        } => {
            let (config, out) = load(&common)?;
            let seeds = match (seed, seeds) {
                (Some(s), _) => vec![s],
                (None, Some(r)) => parse_range(&r)?,
                (None, None) => config.seeds.clone(),
            };
            let dir = out.unwrap_or_else(|| PathBuf::from("plp-out"));
            let res = harness::compare_to_dir(&config, &seeds, &dir, true_modes);
            let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap_or_default();
            print!("{summary}");
            res.map(|_| ())
        }
        Command::PatternStats {
            common,
            oracle_trials,
            seed,
        } => {
            let (config, out) = load(&common)?;
            let rows = harness::pattern_stats(&config, oracle_trials, seed)?;
            emit(out.as_ref(), "pattern_stats.csv", &harness::pattern_stats_csv(&rows)?)
        }
        Command::SlsCheck { common, tol } => {
            let (config, out) = load(&common)?;
            let rows = harness::sls_check(&config, tol)?;
            emit(out.as_ref(), "sls_check.csv", &harness::sls_check_csv(&rows)?)?;
            if rows.iter().all(|r| r.pass) {
                Ok(())
            } else {
                eprintln!("some responses failed the check");
                Err(HarnessError::Runtime {
                    controller: "sls-check",
                    seed: 0,
                    error: plp_core::Error::Numerical("response check failed".into()),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
