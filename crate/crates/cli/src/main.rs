//! `clcmt`: train, evaluate and report on cooperative lane-change learners.
//!
//! Failures print a single line `error: <kind>: <message>` on stderr, where
//! kind is `usage` (exit 2) or `runtime` (exit 1).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clcmt::algorithms::{gradient_suite, AlgoHyperparams, Algorithm};
use clcmt::harness::{
    evaluate, evaluate_with_config, export_trajectories, train_with_progress, utilities_for_runs, HarnessError,
    RunCheckpoint, RunConfig, Stage, EVAL_HEADER,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "clcmt",
    version,
    about = "Cooperative lane-change learners: train, evaluate, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one learner and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        algo: Option<Algorithm>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Run directory; defaults to `runs/<algo>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a progress line every N episodes (0 disables).
        #[arg(long, default_value_t = 100)]
        progress_every: usize,
    },
    /// Greedy rollouts of a checkpointed policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reject the checkpoint unless it was trained under this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Min-max utility table over finished runs.
    Utilities {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Ego trajectories of one training stage as CSV.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// early, mid, late or final-optimal
        #[arg(long)]
        stage: Stage,
    },
    /// Backprop versus finite differences on every shipped network.
    Gradcheck {
        #[arg(long)]
        width: Option<usize>,
        /// Parameters sampled per network.
        #[arg(long, default_value_t = 3000)]
        max_params: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            seed,
            algo,
            episodes,
            out,
            progress_every,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(algo) = algo {
                cfg.algorithm.name = algo;
            }
            if let Some(n) = episodes {
                cfg.schedule.episodes = n;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.algorithm.name, cfg.seed)));
            let summary = train_with_progress(&cfg, &out, &mut |r| {
                if progress_every > 0 && (r.episode + 1) % progress_every == 0 {
                    eprintln!(
                        "episode {} reward_ma {:.3} steps {} {}",
                        r.episode + 1,
                        r.reward_moving_average,
                        r.steps,
                        r.termination
                    );
                }
            })?;
            let tail = &summary.records[summary.records.len().saturating_sub(100)..];
            let crashes = tail.iter().filter(|r| r.crashed()).count();
            let mean_steps = tail.iter().map(|r| r.steps as f64).sum::<f64>() / tail.len() as f64;
            println!(
                "run {} episodes {} last{}_crashes {} last{}_mean_steps {:.2}",
                summary.run_dir.display(),
                summary.records.len(),
                tail.len(),
                crashes,
                tail.len(),
                mean_steps
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            config,
        } => {
            let ck = RunCheckpoint::load(&checkpoint)?;
            let stats = match config {
                Some(path) => evaluate_with_config(&ck, &RunConfig::load(&path)?, episodes, seed)?,
                None => evaluate(&ck, episodes, seed)?,
            };
            println!("{EVAL_HEADER}");
            println!("{}", stats.to_csv_row());
        }
        Command::Utilities { runs } => {
            print!("{}", utilities_for_runs(&runs)?);
        }
        Command::Export { run, stage } => {
            let report = export_trajectories(&run, stage)?;
            println!("wrote {} ({} episodes)", report.path.display(), report.episodes_written);
            for episode in report.missing {
                eprintln!("missing recording: episode {episode}");
            }
        }
        Command::Gradcheck {
            width,
            max_params,
            seed,
        } => {
            let mut hp = AlgoHyperparams::default();
            if let Some(w) = width {
                hp.hidden_width = w;
            }
            hp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let results = gradient_suite(hp, max_params, seed).map_err(|e| Failure::Runtime(e.to_string()))?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!(
                    "{} {} {:?} checked {} skipped {} max_rel_err {:.3e}",
                    r.algorithm,
                    r.network,
                    r.sizes,
                    r.report.checked,
                    r.report.skipped_kinks,
                    r.report.max_relative_error
                );
                worst = worst.max(r.report.max_relative_error);
            }
            println!("max_rel_err {worst:.3e}");
            if !(worst < GRADCHECK_TOLERANCE) {
                return Err(Failure::Runtime(format!(
                    "gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn one_line(message: &str) -> String {
    message.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: usage: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: runtime: {}", one_line(&m));
            ExitCode::from(1)
        }
    }
}
