use std::path::PathBuf;
use std::process::ExitCode;

use blocks_core::cli::{self, EvalOptions, ExperimentConfig, Overrides, RolloutOptions, Split};
use blocks_core::Result;
use clap::{Args, Parser, Subcommand};

/// Blocks-world instruction following experiments.
#[derive(Debug, Parser)]
#[command(name = "blocks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(
            &self.config,
            &Overrides {
                algo: self.algo.clone(),
                preset: self.preset.clone(),
                seed: self.seed,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the output directory.
    GenData(Common),
    /// Train the configured learner.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint, an ensemble or a baseline on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated policy checkpoints to average.
        #[arg(long, value_delimiter = ',')]
        ensemble: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Sample actions instead of taking the most likely one.
        #[arg(long)]
        sample: bool,
        /// Replay the demonstrations.
        #[arg(long, conflicts_with_all = ["checkpoint", "ensemble"])]
        demo: bool,
    },
    /// Check that potential-based shaping keeps the policy order on random MDPs.
    ShapingCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// MDP fixtures (JSON) checked in addition to the random ones.
        #[arg(long)]
        fixture: Vec<PathBuf>,
    },
    /// Print one episode step by step with its reward terms.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        example: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Follow the demonstration.
        #[arg(long, conflicts_with = "checkpoint")]
        demo: bool,
        #[arg(long)]
        sample: bool,
    },
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(common) => {
            let s = cli::gen_data(&common.load()?)?;
            println!(
                "wrote {} (train {}, dev {}, test {})",
                s.path.display(),
                s.train,
                s.dev,
                s.test
            );
        }
        Command::Train { common, resume } => {
            let s = cli::train(&common.load()?, resume)?;
            println!("trained {} epochs into {}", s.epochs_done, s.out.display());
            if let Some(best) = s.best {
                println!("best dev epoch {}: {}", best.epoch, best.csv_row());
            }
        }
        Command::Eval {
            common,
            checkpoint,
            ensemble,
            split,
            sample,
            demo,
        } => {
            let report = cli::eval(
                &common.load()?,
                &EvalOptions {
                    checkpoint,
                    ensemble,
                    split: Some(split),
                    sample,
                    demonstrations: demo,
                },
            )?;
            println!("{}", blocks_core::eval::AGGREGATE_HEADER);
            println!("{}", report.aggregate_row());
        }
        Command::ShapingCheck {
            trials,
            seed,
            fixture,
        } => {
            let s = cli::shaping_check(trials, seed, &fixture)?;
            println!(
                "state potential: {}/{} preserved; state-action potential: {}/{} preserved",
                s.state_preserved, s.trials, s.state_action_preserved, s.trials
            );
            for (path, r) in fixture.iter().zip(&s.fixtures) {
                println!(
                    "{}: {} shaping over {} policies, {}",
                    path.display(),
                    r.mode,
                    r.n_policies,
                    if r.preserved {
                        "order preserved".to_string()
                    } else {
                        format!("{} order violations", r.violations.len())
                    }
                );
                for v in &r.violations {
                    let view = v
                        .start_state
                        .map_or("mean over start states".to_string(), |s| {
                            format!("start state {s}")
                        });
                    println!(
                        "  {view}: policies {:?} and {:?} valued {:?} unshaped, {:?} shaped",
                        v.policy_a, v.policy_b, v.unshaped, v.shaped
                    );
                }
            }
            if !s.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Rollout {
            common,
            example,
            checkpoint,
            demo,
            sample,
        } => {
            let text = cli::rollout(
                &common.load()?,
                &example,
                &RolloutOptions {
                    checkpoint,
                    sample,
                    demonstration: demo,
                },
            )?;
            print!("{text}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
