//! `abc`: one entry point for every pipeline stage, evaluation and experiment.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::commands::Report;
use crate::error::CliError;

pub const VERSION: &str = env!("ABC_VERSION");

#[derive(Debug, Parser)]
#[command(name = "abc", version = VERSION, about = "Desk-scale instruction-controlled embedding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; every file the command writes goes here.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Seeded {
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from the documented full-scale settings instead of desk defaults.
    #[arg(long, conflicts_with = "config")]
    pub paper_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its benchmark split.
    GenWorld {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the in-batch model used for mining.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Mine hard negatives with a trained model.
    Mine {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, visible_alias = "ckpt")]
        model: PathBuf,
        /// Accept fewer than k negatives when too few captions are eligible.
        #[arg(long)]
        allow_fewer: bool,
    },
    /// Stage 1: contrastive pretraining on mined negatives.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mined: PathBuf,
    },
    /// Stage 2: instruction fine-tuning of a stage-1 checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-1 checkpoint; overrides `stage1_checkpoint` in the config.
        #[arg(long, visible_alias = "ckpt")]
        model: Option<PathBuf>,
    },
    /// Instruction-free image/text retrieval.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, visible_alias = "ckpt")]
        model: PathBuf,
    },
    /// Prompt-template classification by one aspect.
    EvalClassify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, visible_alias = "ckpt")]
        model: PathBuf,
    },
    /// Instruction-controlled retrieval, instructed and instruction-blind.
    EvalCtrlbench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, visible_alias = "ckpt")]
        model: PathBuf,
        /// Benchmark file; defaults to ctrlbench.jsonl in the corpus directory.
        #[arg(long)]
        bench: Option<PathBuf>,
    },
    /// Paired mined vs random negative runs, tracking the temperature.
    ExpTau {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mined: PathBuf,
        /// Model that scores captions for the random-negative records.
        #[arg(long, visible_alias = "ckpt")]
        model: PathBuf,
    },
    /// Attention mode × adapter rank ablation.
    ExpArch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mined: PathBuf,
    },
    /// Batch size vs steps at equal samples seen.
    ExpScaling {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mined: PathBuf,
    },
    /// Re-check a corpus and optionally audit a mined file against it.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mined: Option<PathBuf>,
        /// With --mined: also check the window rule by rescoring with this model.
        #[arg(long, visible_alias = "ckpt", requires = "mined")]
        model: Option<PathBuf>,
        #[arg(long, requires = "mined")]
        allow_fewer: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenWorld { .. } => "gen-world",
            Command::Bootstrap { .. } => "bootstrap",
            Command::Mine { .. } => "mine",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::EvalRetrieval { .. } => "eval-retrieval",
            Command::EvalClassify { .. } => "eval-classify",
            Command::EvalCtrlbench { .. } => "eval-ctrlbench",
            Command::ExpTau { .. } => "exp-tau",
            Command::ExpArch { .. } => "exp-arch",
            Command::ExpScaling { .. } => "exp-scaling",
            Command::Validate { .. } => "validate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenWorld { common, .. }
            | Command::Bootstrap { common, .. }
            | Command::Mine { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::EvalRetrieval { common, .. }
            | Command::EvalClassify { common, .. }
            | Command::EvalCtrlbench { common, .. }
            | Command::ExpTau { common, .. }
            | Command::ExpArch { common, .. }
            | Command::ExpScaling { common, .. }
            | Command::Validate { common, .. } => common,
        }
    }
}

fn dispatch(command: &Command, report: &mut Report) -> Result<(), CliError> {
    use commands::*;
    match command {
        Command::GenWorld { common, seed } => gen_world(common, *seed, report),
        Command::Bootstrap { common, seeded, corpus } => bootstrap(common, seeded, corpus, report),
        Command::Mine {
            common,
            seeded,
            corpus,
            model,
            allow_fewer,
        } => mine(common, seeded, corpus, model, *allow_fewer, report),
        Command::Pretrain {
            common,
            seeded,
            corpus,
            mined,
        } => pretrain(common, seeded, corpus, mined, report),
        Command::Finetune {
            common,
            seeded,
            corpus,
            model,
        } => finetune(common, seeded, corpus, model.as_deref(), report),
        Command::EvalRetrieval { common, corpus, model } => eval_retrieval(common, corpus, model, report),
        Command::EvalClassify { common, corpus, model } => eval_classify(common, corpus, model, report),
        Command::EvalCtrlbench {
            common,
            corpus,
            model,
            bench,
        } => eval_ctrlbench(common, corpus, model, bench.as_deref(), report),
        Command::ExpTau {
            common,
            seeded,
            corpus,
            mined,
            model,
        } => exp_tau(common, seeded, corpus, mined, model, report),
        Command::ExpArch {
            common,
            seeded,
            corpus,
            mined,
        } => exp_arch(common, seeded, corpus, mined, report),
        Command::ExpScaling {
            common,
            seeded,
            corpus,
            mined,
        } => exp_scaling(common, seeded, corpus, mined, report),
        Command::Validate {
            common,
            corpus,
            mined,
            model,
            allow_fewer,
        } => validate(common, corpus, mined.as_deref(), model.as_deref(), *allow_fewer, report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ABC_LOG", "info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let out = &cli.command.common().out;
    let start = Instant::now();
    let mut report = Report::new(name);
    let result = dispatch(&cli.command, &mut report);
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    let written = report.write(out, start.elapsed());
    match result.and(written) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
