//! `neurossl` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration or input schema errors, 3 shape,
//! compatibility or missing-file errors, 4 non-finite loss.

mod commands;
mod dataset;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "neurossl", version, about = "Self-supervised pretext-task pretraining for multi-sensor neural recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct SeedArgs {
    /// Comma-separated seed list; one run per seed.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Filter, notch, resample and repair every recording of a dataset.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250.0)]
        target_rate: f64,
        /// Mains frequency to notch (with harmonics); 0 disables.
        #[arg(long, default_value_t = 50.0)]
        notch: f64,
        /// Accept recordings below 500 Hz, skipping stages that cannot apply.
        #[arg(long)]
        allow_low_rate: bool,
    },
    /// Self-supervised pre-training, one checkpoint per seed.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; repeat for several datasets.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Add the detection loss on labelled windows (weight from config, 1.0 if unset).
        #[arg(long)]
        semi_supervised: bool,
    },
    /// Fine-tune a downstream head on labelled data.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        task: neurossl::model::DownstreamTask,
        #[arg(long)]
        mode: neurossl::train::FineTuneMode,
        /// Output directory of a previous `pretrain` run.
        #[arg(long, required_unless_present = "no_pretrain", conflicts_with = "no_pretrain")]
        pretrained: Option<PathBuf>,
        /// Random-backbone control: skip loading pre-trained weights.
        #[arg(long)]
        no_pretrain: bool,
        /// Subjects excluded from fine-tuning, e.g. for later zero-shot evaluation.
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Evaluate fine-tuned models, optionally zero-shot on held-out subjects.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Output directory of a previous `finetune` run.
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "heldout")]
        zero_shot: bool,
        #[arg(long, value_delimiter = ',')]
        heldout: Vec<String>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Merge fine-tuning runs into one tidy table plus per-task series.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out, seed } => commands::synth(&spec, &out, seed),
        Command::Preprocess { data, out, target_rate, notch, allow_low_rate } => {
            commands::preprocess(&data, &out, target_rate, notch, allow_low_rate)
        }
        Command::Pretrain { config, data, out, seeds, semi_supervised } => {
            commands::pretrain(&config, &data, &out, &seeds.seeds, semi_supervised)
        }
        Command::Finetune { config, data, out, task, mode, pretrained, no_pretrain: _, holdout, seeds } => {
            commands::finetune(&commands::FinetuneArgs {
                config: &config,
                data: &data,
                out: &out,
                task,
                mode,
                pretrained: pretrained.as_deref(),
                holdout: &holdout,
                seeds: &seeds.seeds,
            })
        }
        Command::Evaluate { config, data, finetuned, out, zero_shot, heldout, seeds } => {
            commands::evaluate(&config, &data, &finetuned, &out, zero_shot, &heldout, &seeds.seeds)
        }
        Command::Report { runs, out } => commands::report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
