//! `nocrek`: data generation, training, captioning and knowledge edits.
//!
//! Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.

mod commands;
mod config;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Validation failure that maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Parser)]
#[command(name = "nocrek", version, about = "Scene captioning with an editable definition store")]
pub struct Cli {
    /// JSON config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Zero report timestamps and timings so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    TestSeen,
    TestNovel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub k_vocab: Option<usize>,
    #[arg(long)]
    pub min_constraints: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelInputs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world into the --out directory.
    GenData,
    /// Build a knowledge store file from definitions.
    BuildKnowledge {
        /// Dataset directory; its seen definitions are used unless --all.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Explicit definitions file instead of the dataset's.
        #[arg(long)]
        definitions: Option<PathBuf>,
        /// Use every definition in the dataset, novel classes included.
        #[arg(long)]
        all: bool,
    },
    /// Train stage 1, stage 2 or both; writes checkpoints and logs to --out.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        knowledge: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Stage-1 checkpoint to continue from when --stage 2.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-region retrieval for one scene.
    Retrieve {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        scene: u64,
        #[arg(long, value_enum)]
        split: Option<Split>,
        #[arg(long)]
        k_vocab: Option<usize>,
    },
    /// Caption one scene, listing the retrieved vocabulary.
    Caption {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        scene: u64,
        #[arg(long, value_enum)]
        split: Option<Split>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Caption a split and report CIDEr, per-class F1 and retrieval quality.
    Evaluate {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long, value_enum, default_value = "test-novel")]
        split: Split,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Add or remove definitions, writing a new store revision file.
    UpdateKnowledge {
        #[arg(long)]
        knowledge: Option<PathBuf>,
        /// Definitions file to add.
        #[arg(long)]
        add: Option<PathBuf>,
        /// Comma-separated terms to remove.
        #[arg(long, value_delimiter = ',')]
        remove: Vec<String>,
    },
    /// Evaluate one checkpoint under several store edits.
    Scenarios {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Comma-separated: baseline, drop-seen, drop-novel, add-novel, drop-<P>.
        #[arg(long, value_delimiter = ',')]
        scenario: Vec<String>,
        #[arg(long)]
        drop_percent: Option<u32>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Write the store embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        knowledge: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<nocrek_core::Error>() {
        Some(nocrek_core::Error::Io { .. } | nocrek_core::Error::Diverged { .. }) => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .filter_map(|e| e.downcast_ref::<std::io::Error>())
        .any(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("NOCREK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Invalid(format!("NOCREK_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match init_threads().and_then(|()| commands::run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
