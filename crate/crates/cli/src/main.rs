// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tfdecomp`: decompose, verify and analyse encoder embeddings.
//!
//! Exit codes: 0 success, 1 invariant violation, 2 usage or load error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfdecomp_core::{Activation, Error, Precision};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable inputs, inconsistent files.
    Usage(String),
    /// A checked property failed.
    Invariant(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Invariant(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Invariant(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { .. } | Error::NonFinite(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tfdecomp", version, about = "Additive decomposition of Transformer encoder embeddings")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Model directory (model.safetensors + config.json) or checkpoint file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Model config JSON, when not next to the checkpoint.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON table mapping checkpoint names to parameter slots.
    #[arg(long)]
    pub name_map: Option<PathBuf>,
    /// Weight precision: 32 rounds weights through f32.
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CorpusArgs {
    /// Token-id corpus, one sequence per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Parallel segment-id file.
    #[arg(long)]
    pub segments: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check that the four terms add up to the traced embeddings.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Largest allowed max-norm residual (default 1e-10, or 1e-7 at 32-bit).
        #[arg(long)]
        tolerance: Option<f64>,
        /// Sublayer cuts: `all`, `last` or a comma list.
        #[arg(long)]
        cuts: Option<String>,
    },
    /// Export term vectors per token.
    Decompose {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Sublayer cuts: `all`, `last` or a comma list.
        #[arg(long)]
        cuts: Option<String>,
        /// `csv` or `jsonl`.
        #[arg(long)]
        format: Option<String>,
    },
    /// Importance profile per layer and term.
    Importance {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Layers (0 is the embedding stage): `all`, `last` or a comma list.
        #[arg(long)]
        cuts: Option<String>,
    },
    /// How well a linear map explains each feed-forward sublayer.
    FfFit {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Spearman correlation of importances between two models.
    Correlate {
        #[command(flatten)]
        model: ModelArgs,
        /// Second model, same layout as --model.
        #[arg(long)]
        model_b: Option<PathBuf>,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Agreement matrix between prediction columns of a CSV file.
    Agree {
        /// CSV with one column per system, plus optional `gold` and `item`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// `micro` or `macro` (macro needs a `gold` column).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train and score probes on term features.
    Probe {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// `wsd` (lemma-labelled records) or `mlm` (recover corrupted tokens).
        #[arg(long)]
        task: Option<String>,
        /// Probe dataset, JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Sublayer cut to read features from (default: last).
        #[arg(long)]
        cuts: Option<String>,
        /// Feature selectors such as `e`, `i`, `i+h` (comma-separated).
        #[arg(long, value_delimiter = ',')]
        selectors: Option<Vec<String>>,
        /// `linear`, `knn`, `tied`, `baseline` or `all`.
        #[arg(long)]
        method: Option<String>,
        /// `accuracy` or `macro-f1`.
        #[arg(long)]
        metric: Option<String>,
        /// Neighbours for the knn method.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Mask token id for the mlm task (default: last vocabulary id).
        #[arg(long)]
        mask_token: Option<u32>,
        /// Drop lemmas with a single label.
        #[arg(long)]
        drop_monosemous: bool,
    },
    /// Write a random model, corpus and probe dataset.
    GenToy(commands::GenToyArgs),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("TFDECOMP_THREADS") else {
        return Ok(());
    };
    let cap: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("TFDECOMP_THREADS: `{raw}` is not a positive integer")))?;
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    rayon::ThreadPoolBuilder::new()
        .num_threads(cap.min(available))
        .build_global()
        .map_err(|e| CliError::usage(format!("TFDECOMP_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let file = match &cli.config {
        Some(p) => config::RunConfig::load(p)?,
        None => config::RunConfig::default(),
    };
    let ctx = commands::Context {
        out: config::pick(&cli.out, &file.out),
        file,
    };
    match cli.command {
        Command::Verify {
            model,
            corpus,
            tolerance,
            cuts,
        } => commands::verify(&ctx, &model, &corpus, tolerance, cuts),
        Command::Decompose {
            model,
            corpus,
            cuts,
            format,
        } => commands::decompose(&ctx, &model, &corpus, cuts, format),
        Command::Importance { model, corpus, cuts } => commands::importance(&ctx, &model, &corpus, cuts),
        Command::FfFit { model, corpus } => commands::ff_fit(&ctx, &model, &corpus),
        Command::Correlate { model, model_b, corpus } => commands::correlate(&ctx, &model, model_b, &corpus),
        Command::Agree { predictions, mode } => commands::agree(&ctx, predictions, mode),
        Command::Probe {
            model,
            corpus,
            task,
            records,
            cuts,
            selectors,
            method,
            metric,
            k,
            seed,
            mask_token,
            drop_monosemous,
        } => commands::probe(
            &ctx,
            &model,
            &corpus,
            commands::ProbeFlags {
                task,
                records,
                cut: cuts,
                selectors,
                method,
                metric,
                k,
                seed,
                mask_token,
                drop_monosemous: drop_monosemous.then_some(true),
            },
        ),
        Command::GenToy(args) => commands::gen_toy(&ctx, &args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Parses an activation name for gen-toy.
pub fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse::<Activation>().map_err(|e| e.to_string())
}
