use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tempscale_cli::commands::{
    self, parse_target, AnalyzeArgs, AttackArgs, CorruptArgs, DataSource, SweepArgs, TrainArgs,
};
use tempscale_cli::{CliResult, CACHE_DIR_ENV};
use tempscale_core::attack::LossKind;
use tempscale_core::Exec;

/// Temperature-scaling experiments: training, attacks, corruptions,
/// geometry analyses and sweeps.
#[derive(Parser)]
#[command(name = "tempscale", version)]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Directory that relative dataset paths resolve against.
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Take the dataset (and master seed) from an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `reference` or a JSON dataset-spec file.
    #[arg(long)]
    dataset: Option<String>,
    /// Master seed; overrides the config's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training temperature; defaults to the config's first.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the config's adversarial-training settings.
        #[arg(long)]
        adversarial: bool,
    },
    /// Attack a saved model on the test split and write per-sample outcomes.
    AttackEval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Defaults to eps/4.
        #[arg(long)]
        step_size: Option<f64>,
        /// ce, cw or dlr.
        #[arg(long, default_value = "ce")]
        loss: String,
        /// untargeted, error-prone or a class index.
        #[arg(long, default_value = "untargeted")]
        target: String,
        #[arg(long, default_value_t = 0.0)]
        kappa: f64,
        #[arg(long)]
        no_random_start: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy under common corruptions.
    CorruptEval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// 1–5; all five when omitted.
        #[arg(long)]
        severity: Option<u8>,
        /// Comma-separated kinds; defaults to all that fit the data.
        #[arg(long)]
        kinds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Geometry, variance and logit-shift CSVs plus feature export.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every temperature (and replicate) of a config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-form gradients vs autodiff vs finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
}

fn source(d: DataArgs, cache_dir: &Option<PathBuf>) -> DataSource {
    DataSource {
        config: d.config,
        dataset: d.dataset,
        seed: d.seed,
        cache_dir: cache_dir.clone(),
    }
}

fn run(cli: Cli) -> CliResult<String> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let cache = cli.cache_dir;
    match cli.command {
        Command::Train {
            config,
            tau,
            seed,
            out,
            adversarial,
        } => commands::train(
            &TrainArgs {
                config,
                tau,
                seed,
                out,
                adversarial,
                cache_dir: cache,
            },
            exec,
        ),
        Command::AttackEval {
            model,
            data,
            eps,
            steps,
            step_size,
            loss,
            target,
            kappa,
            no_random_start,
            out,
        } => {
            let loss: LossKind = loss.parse()?;
            commands::attack_eval(
                &AttackArgs {
                    model,
                    data: source(data, &cache),
                    eps,
                    steps,
                    step_size,
                    loss,
                    target: parse_target(&target)?,
                    kappa,
                    random_start: !no_random_start,
                    out,
                },
                exec,
            )
        }
        Command::CorruptEval {
            model,
            data,
            severity,
            kinds,
            out,
        } => commands::corrupt_eval(
            &CorruptArgs {
                model,
                data: source(data, &cache),
                severity,
                kinds,
                out,
            },
            exec,
        ),
        Command::Analyze {
            model,
            data,
            eps,
            steps,
            out,
        } => commands::analyze(
            &AnalyzeArgs {
                model,
                data: source(data, &cache),
                eps,
                steps,
                out,
            },
            exec,
        ),
        Command::Sweep { config, out, seed } => commands::sweep(
            &SweepArgs {
                config,
                out,
                seed,
                cache_dir: cache,
            },
            exec,
        ),
        Command::GradCheck { seed, instances } => commands::grad_check(seed, instances),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
