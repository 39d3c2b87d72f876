use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use querywise::pipeline::{execute, Command, PipelineError, Profile, RunConfig};
use tracing_subscriber::EnvFilter;

/// Roll out search agents, score their queries and build training datasets.
#[derive(Debug, Parser)]
#[command(name = "querywise", version)]
struct Cli {
    /// JSON run configuration (required for subcommands that call backends).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's parallelism bound.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Training,
    Inference,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate one trajectory per question.
    Rollout {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "inference")]
        profile: ProfileArg,
    },
    /// Score every search step of each trajectory.
    Assess {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite low-quality queries and regenerate from them.
    Refine {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        assessments: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep well-formed, correct trajectories whose queries are all high quality.
    BuildSft {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        assessments: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one chosen/rejected pair per question.
    BuildDpo {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build rollout groups with shaped rewards and normalized advantages.
    BuildGrpo {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only questions the policy fails on this many trial rollouts.
        #[arg(long)]
        screen_trials: Option<usize>,
    },
    /// Collect evaluator and refiner outputs as student training records.
    JudgeDistill {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute EM, F1, search efficiency and search quality.
    Eval {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        assessments: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Rollout { questions, out, profile } => Command::Rollout {
                questions,
                out,
                profile: match profile {
                    ProfileArg::Training => Profile::Training,
                    ProfileArg::Inference => Profile::Inference,
                },
            },
            Sub::Assess { trajectories, out } => Command::Assess { trajectories, out },
            Sub::Refine { trajectories, assessments, out } => {
                Command::Refine { trajectories, assessments, out }
            }
            Sub::BuildSft { trajectories, assessments, out } => {
                Command::BuildSft { trajectories, assessments, out }
            }
            Sub::BuildDpo { questions, out } => Command::BuildDpo { questions, out },
            Sub::BuildGrpo { questions, out, screen_trials } => {
                Command::BuildGrpo { questions, out, screen_trials }
            }
            Sub::JudgeDistill { trajectories, out } => Command::JudgeDistill { trajectories, out },
            Sub::Eval { trajectories, assessments, out } => Command::Eval { trajectories, assessments, out },
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>, PipelineError> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.parallelism {
        cfg.parallelism = n;
    }
    cfg.validate()?;
    Ok(Some(cfg))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let command = Command::from(cli.command);
    match execute(&command, cfg.as_ref()).await {
        Ok(report) => {
            eprintln!(
                "{}: {} inputs, {} retained, {} excluded, {} errored, {} dropped; report at {}",
                report.subcommand,
                report.inputs,
                report.retained,
                report.excluded,
                report.errored,
                report.dropped,
                command.report_path().display()
            );
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
