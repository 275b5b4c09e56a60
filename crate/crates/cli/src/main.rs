use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use mosaic_cli::commands::{self, AnalyticChoice, Failure, SampleCounts};
use mosaic_cli::config::{key_reference, ExperimentConfig};
use mosaic_core::model::BackboneKind;
use mosaic_core::theory::{AnalyticMode, VerificationConfig};

/// Mosaic diffusion experiments: data, training, sampling and checks.
#[derive(Parser, Debug)]
#[command(name = "mosaic", version)]
struct Cli {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Copy)]
struct Counts {
    /// Overrides eval.samples_per_run.
    #[arg(long)]
    samples_per_run: Option<usize>,
    /// Overrides eval.runs.
    #[arg(long)]
    runs: Option<usize>,
}

impl From<Counts> for SampleCounts {
    fn from(c: Counts) -> Self {
        SampleCounts {
            samples_per_run: c.samples_per_run,
            runs: c.runs,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training set and a preview grid.
    GenData,
    /// Train one backbone on the generated dataset.
    Train {
        /// Backbone; overrides model.kind.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<BackboneKind>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample from a checkpoint and score self-consistency.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint reported in the same summary.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Fail unless the first checkpoint reaches this mean.
        #[arg(long)]
        min_consistency: Option<f64>,
        #[command(flatten)]
        counts: Counts,
    },
    /// Random-block baseline against exact enumeration.
    Baseline {
        #[command(flatten)]
        counts: Counts,
    },
    /// Finite-difference and identity checks.
    GradCheck {
        /// Random instances per differentiable op.
        #[arg(long, default_value_t = 100)]
        op_instances: usize,
        /// Random token sets for the attention identities.
        #[arg(long, default_value_t = 1000)]
        identity_instances: usize,
        /// Toy distributions for the functional gradient.
        #[arg(long, default_value_t = 20)]
        distributions: usize,
    },
    /// Sample with a training-free patch score.
    AnalyticSample {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[command(flatten)]
        counts: Counts,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Local,
    Top1,
    /// Both, with a one-sided test that top1 beats local.
    Compare,
}

fn parse_kind(s: &str) -> Result<BackboneKind, String> {
    s.parse().map_err(|e: mosaic_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { kind, resume } => commands::train(&mut cfg, kind, resume.as_deref()),
        Command::Eval {
            checkpoint,
            compare,
            min_consistency,
            counts,
        } => commands::eval(
            &mut cfg,
            &checkpoint,
            compare.as_deref(),
            counts.into(),
            min_consistency,
        ),
        Command::Baseline { counts } => commands::baseline(&mut cfg, counts.into()),
        Command::GradCheck {
            op_instances,
            identity_instances,
            distributions,
        } => commands::grad_check(
            &cfg,
            &VerificationConfig {
                op_instances,
                identity_instances,
                distributions,
                seed: cfg.eval.seed,
            },
        ),
        Command::AnalyticSample { mode, counts } => {
            let choice = match mode {
                ModeArg::Local => AnalyticChoice::One(AnalyticMode::Local),
                ModeArg::Top1 => AnalyticChoice::One(AnalyticMode::Top1),
                ModeArg::Compare => AnalyticChoice::Compare,
            };
            commands::analytic(&mut cfg, choice, counts.into())
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(key_reference()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
