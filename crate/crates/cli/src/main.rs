mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csr_core::data::Split;

use crate::commands::Context;
use crate::config::{Layout, PipelineConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "csr", version, about = "Concept-grounded similarity reasoning pipeline")]
struct Cli {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where the command's JSON report goes.
    #[arg(long, global = true)]
    report_path: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenSynthetic {
        /// Output directory; defaults to the configured data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the concept head on the training split.
    TrainConcepts,
    /// Extract local concept vectors with the trained concept head.
    ExtractVectors,
    /// Learn the projector and prototype atlas, then link prototypes to images.
    LearnPrototypes,
    /// Discard or restore prototypes in the atlas checkpoint.
    Refine {
        /// Prototype ids `k:m`, comma separated.
        #[arg(long, value_delimiter = ',')]
        discard: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        restore: Vec<String>,
        /// Also discard what the configured refine rules flag.
        #[arg(long)]
        auto: bool,
    },
    /// Train the task head on prototype similarity scores.
    TrainHead,
    /// Macro F1 and explanation size.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Pointing-game hit rate.
    PgEval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Oracle interaction gain on indecisive samples.
    InteractEval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the HTTP service until interrupted.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, base) = PipelineConfig::load(cli.config.as_deref())?;
    let cfg = cfg.with_seed(cli.seed);
    cfg.validate()?;
    let ctx = Context { layout: Layout::new(&cfg.paths, &base), cfg, report_path: cli.report_path };
    match cli.command {
        Command::GenSynthetic { out } => commands::gen_synthetic(&ctx, out.as_deref()),
        Command::TrainConcepts => commands::train_concepts(&ctx),
        Command::ExtractVectors => commands::extract_vectors(&ctx),
        Command::LearnPrototypes => commands::learn_prototypes(&ctx),
        Command::Refine { discard, restore, auto } => commands::refine(&ctx, &discard, &restore, auto),
        Command::TrainHead => commands::train_head(&ctx),
        Command::Eval { split } => commands::eval(&ctx, split.into()),
        Command::PgEval { split } => commands::pg_eval(&ctx, split.into()),
        Command::InteractEval { split } => commands::interact_eval(&ctx, split.into()),
        Command::Serve { host, port } => commands::serve(&ctx, host, port),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CSR_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
