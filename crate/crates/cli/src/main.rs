//! `elastic-hte`: combine a randomized trial with real-world data for
//! heterogeneous treatment effects.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use elastic_hte_cli::commands::{self, Io};
use elastic_hte_cli::config::RunConfig;
use elastic_hte_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "elastic-hte", version, about = "Elastic integrative estimation of heterogeneous treatment effects")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ELASTIC_HTE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit rt, eff and elastic estimators to a CSV dataset.
    Estimate(DataArgs),
    /// Run the comparability test on a CSV dataset.
    Gate(DataArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
    /// Sample the limiting mixture law of the elastic estimator.
    Mixture(MixtureArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// CSV with columns source, treatment, outcome and covariates.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
    /// `adaptive` or a level in (0, 1); for `gate`, a comma-separated list
    /// of levels to tabulate.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct MixtureArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    gamma: Option<f64>,
}

fn setup(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn parse_levels(flag: &str) -> CliResult<Vec<f64>> {
    flag.split(',')
        .map(|s| match s.trim().parse::<f64>() {
            Ok(g) if g > 0.0 && g < 1.0 => Ok(g),
            _ => Err(CliError::Input(format!("--gamma: expected levels in (0, 1), got {s:?}"))),
        })
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Estimate(a) => {
            let mut cfg = setup(&a.common)?;
            if let Some(g) = &a.gamma {
                cfg.set_gamma(g)?;
            }
            if let Some(alpha) = a.alpha {
                cfg.set_alpha(alpha)?;
            }
            let io = Io { data: Some(a.data), out: cfg.out_dir(a.common.out.as_deref()) };
            let report = commands::estimate::run(&io, &cfg)?;
            eprintln!(
                "gate T = {:.3} ({}), wrote {}",
                report.gate.t_stat,
                report.gate.decision,
                io.out.join("estimate.json").display()
            );
        }
        Command::Gate(a) => {
            let mut cfg = setup(&a.common)?;
            if let Some(g) = &a.gamma {
                cfg.gate.levels = parse_levels(g)?;
            }
            if let Some(alpha) = a.alpha {
                cfg.set_alpha(alpha)?;
            }
            let io = Io { data: Some(a.data), out: cfg.out_dir(a.common.out.as_deref()) };
            let report = commands::gate::run(&io, &cfg)?;
            eprintln!("gate T = {:.3}, p = {:.4}", report.selected.t_stat, report.selected.p_value);
        }
        Command::Simulate(a) => {
            let mut cfg = setup(&a.common)?;
            if let Some(r) = a.reps {
                cfg.study.reps = r;
            }
            if let Some(g) = &a.gamma {
                cfg.set_gamma(g)?;
            }
            if let Some(alpha) = a.alpha {
                cfg.set_alpha(alpha)?;
            }
            cfg.validate("")?;
            let io = Io { data: None, out: cfg.out_dir(a.common.out.as_deref()) };
            let result = commands::simulate::run(&io, &cfg)?;
            eprintln!("{} replications per b, wrote {}", result.reps, io.out.display());
        }
        Command::Mixture(a) => {
            let mut cfg = setup(&a.common)?;
            if let Some(g) = a.gamma {
                cfg.mixture.gamma = g;
            }
            cfg.validate("")?;
            let io = Io { data: None, out: cfg.out_dir(a.common.out.as_deref()) };
            let s = commands::mixture::run(&io, &cfg)?;
            eprintln!("xi = {:.4}, truncated fraction = {:.4}", s.xi, s.truncated_fraction);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
