//! `cltci`: synthesize data, pretrain, fine-tune and evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cltci", version, about = "Patient-aware contrastive pretraining and lung segmentation fine-tuning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (TSV or CSV).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-visit dataset with masks and a manifest.
    Synth {
        #[arg(long)]
        num_patients: Option<usize>,
        #[arg(long)]
        images_per_patient: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Contrastive pretraining; writes a checkpoint and loss logs.
    Pretrain {
        #[arg(long, value_parser = ["cl-tci-simclr", "cl-tci-moco", "simclr-baseline", "moco-baseline"])]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Cross-validated fine-tuning over annotation budgets.
    Finetune {
        /// Comma-separated annotation budgets, e.g. 4,8.
        #[arg(long = "M", value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long)]
        folds: Option<usize>,
        /// `none` for random initialization, or a pretraining checkpoint.
        #[arg(long, default_value = "none")]
        init: String,
        #[arg(long)]
        epochs: Option<usize>,
        /// Write predicted validation masks as PNG.
        #[arg(long)]
        save_predictions: bool,
        /// Write the fine-tuned weights of every run.
        #[arg(long)]
        save_models: bool,
    },
    /// Export encoder embeddings, patient cluster purity and a PCA plot.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Neighbours used by the purity metric.
        #[arg(long)]
        k: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::Synth {
            num_patients,
            images_per_patient,
            image_size,
        } => commands::synth(&common, num_patients, images_per_patient, image_size),
        Command::Pretrain { variant, epochs, resume } => {
            commands::pretrain(&common, variant.as_deref(), epochs, resume.as_deref())
        }
        Command::Finetune {
            m,
            folds,
            init,
            epochs,
            save_predictions,
            save_models,
        } => commands::finetune(
            &common,
            commands::FinetuneArgs {
                budgets: m,
                folds,
                init,
                epochs,
                save_predictions,
                save_models,
            },
        ),
        Command::Eval { checkpoint, k } => commands::eval(&common, &checkpoint, k),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
