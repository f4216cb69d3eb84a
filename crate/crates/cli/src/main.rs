//! `polyomic` command-line front end.
//!
//! Every subcommand takes one JSON config file plus optional `--seed` and
//! `--out-dir` overrides. Exit codes: 0 success, 1 runtime failure,
//! 2 config schema violation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load_config, AppError};

#[derive(Parser)]
#[command(name = "polyomic", version, about = "Multi-omic biosequence modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train per-modality BPE vocabularies from a FASTA corpus.
    TokenizerTrain { config: PathBuf },
    /// Pretrain an encoder with masked-language modeling.
    Pretrain { config: PathBuf },
    /// Fine-tune a checkpoint for binding free energy regression.
    FinetuneDg { config: PathBuf },
    /// Fine-tune a checkpoint for per-residue binding-site prediction.
    FinetuneContact { config: PathBuf },
    /// Fine-tune a checkpoint for sequence classification.
    FinetuneClassify { config: PathBuf },
    /// Fine-tune a checkpoint for intra-protein contact-map prediction.
    FinetunePairwiseContact { config: PathBuf },
    /// Fit a contrastive projector over frozen joint embeddings.
    ProbeJoint { config: PathBuf },
    /// Fit a convolutional probe over frozen attention maps.
    ProbeAttn { config: PathBuf },
    /// Build homology-aware cross-validation folds.
    Split { config: PathBuf },
    /// Compute metrics over a predictions table.
    Eval { config: PathBuf },
    /// Score motif-consensus mutants under a ΔG model.
    Mutscan { config: PathBuf },
}

fn run(cli: Cli) -> Result<(), AppError> {
    let (seed, out_dir) = (cli.seed, cli.out_dir);
    macro_rules! dispatch {
        ($path:expr, $ty:ty, $f:path) => {{
            let (mut cfg, bytes): ($ty, Vec<u8>) = load_config($path)?;
            cfg.apply_overrides(seed, out_dir);
            $f(&cfg, &bytes)?;
            Ok(())
        }};
    }
    match &cli.command {
        Command::TokenizerTrain { config } => {
            dispatch!(config, config::TokenizerTrainConfig, commands::tokenizer_train)
        }
        Command::Pretrain { config } => {
            dispatch!(config, config::PretrainConfig, commands::pretrain)
        }
        Command::FinetuneDg { config } => {
            dispatch!(config, config::FinetuneDgConfig, commands::finetune_dg)
        }
        Command::FinetuneContact { config } => {
            dispatch!(config, config::FinetuneContactConfig, commands::finetune_contact)
        }
        Command::FinetuneClassify { config } => {
            dispatch!(config, config::FinetuneClassifyConfig, commands::finetune_classify)
        }
        Command::FinetunePairwiseContact { config } => dispatch!(
            config,
            config::FinetunePairwiseContactConfig,
            commands::finetune_pairwise_contact
        ),
        Command::ProbeJoint { config } => {
            dispatch!(config, config::ProbeJointConfig, commands::probe_joint)
        }
        Command::ProbeAttn { config } => {
            dispatch!(config, config::ProbeAttnConfig, commands::probe_attn)
        }
        Command::Split { config } => dispatch!(config, config::SplitConfig, commands::split),
        Command::Eval { config } => dispatch!(config, config::EvalConfig, commands::eval),
        Command::Mutscan { config } => {
            dispatch!(config, config::MutscanConfig, commands::mutscan)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(AppError::Schema(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
