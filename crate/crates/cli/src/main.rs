//! `sicsf`: synthetic data, training, decoding, scoring and cascade runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sicsf_core::data::DataError;
use sicsf_core::decoding::DecodeError;
use sicsf_core::metrics::{MatchMode, MetricsError};
use sicsf_core::model::ModelError;
use sicsf_core::pipeline::PipelineError;
use sicsf_core::tensorcore::TensorError;
use sicsf_core::tokenizer::TokenizerError;
use sicsf_core::training::TrainError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Io(_) | TokenizerError::Format { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint { .. } | ModelError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGrad(_) | TrainError::Tensor(TensorError::NonFinite(_)) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::EmptyDataset | TrainError::Example { .. } => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Io { .. } | DecodeError::NoVocab => CliError::Data(e.to_string()),
            DecodeError::Model(m) => m.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Train(e) => e.into(),
            PipelineError::Decode(e) => e.into(),
            PipelineError::Model(e) => e.into(),
            PipelineError::Data(e) => e.into(),
            PipelineError::Tokenizer(e) => e.into(),
            PipelineError::Metrics(e) => e.into(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sicsf", version, about = "End-to-end spoken intent classification and slot filling")]
struct Cli {
    /// Print reports as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_enc: Option<f64>,
    #[arg(long)]
    pub lr_dec: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset (manifests and feature files).
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the end-to-end speech → semantics model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        freeze_encoder: bool,
        #[arg(long)]
        adapters: bool,
        /// Copy encoder weights from this checkpoint.
        #[arg(long)]
        init_encoder: Option<PathBuf>,
        /// CSV training log; defaults to `<out>.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        /// Skip per-epoch dev scoring.
        #[arg(long)]
        no_dev: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train a speech → transcript model whose encoder initializes `train`.
    AsrProxyTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Decode a manifest split with a trained checkpoint.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Data directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        len_norm: Option<f64>,
        #[arg(long)]
        greedy: bool,
        /// Write `{"id","prediction","score"}` rows instead of plain lines.
        #[arg(long)]
        jsonl: bool,
    },
    /// Score predictions against a reference manifest.
    Score {
        #[arg(long)]
        pred: PathBuf,
        /// Data directory, manifest or plain semantics file.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "exact")]
        mode: MatchMode,
    },
    /// Train the NLU model on transcripts and score it behind a WER channel.
    CascadeEval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Target WER; repeat or comma-separate for a sweep.
        #[arg(long, value_delimiter = ',')]
        wer: Vec<f64>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Save the trained NLU checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train tokenizers at every size of the configured sweep and check
    /// lossless round trips.
    VocabSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let json = cli.json;
    match cli.command {
        Command::SynthData { config, out, seed } => commands::synth_data(config.as_deref(), &out, seed, json),
        Command::Train {
            config,
            data,
            out,
            freeze_encoder,
            adapters,
            init_encoder,
            log,
            vocab_size,
            no_dev,
            overrides,
        } => commands::train(commands::TrainArgs {
            config,
            data,
            out,
            freeze_encoder,
            adapters,
            init_encoder,
            log,
            vocab_size,
            no_dev,
            overrides,
            json,
        }),
        Command::AsrProxyTrain {
            config,
            data,
            out,
            log,
            overrides,
        } => commands::asr_proxy_train(config.as_deref(), &data, &out, log, &overrides, json),
        Command::Predict {
            config,
            ckpt,
            data,
            split,
            out,
            beam,
            temperature,
            max_len,
            len_norm,
            greedy,
            jsonl,
        } => commands::predict(commands::PredictArgs {
            config,
            ckpt,
            data,
            split,
            out,
            beam,
            temperature,
            max_len,
            len_norm,
            greedy,
            jsonl,
            json,
        }),
        Command::Score { pred, gold, split, mode } => commands::score(&pred, &gold, &split, mode, json),
        Command::CascadeEval {
            config,
            data,
            wer,
            split,
            save,
            overrides,
        } => commands::cascade_eval(config.as_deref(), &data, wer, &split, save, &overrides, json),
        Command::VocabSweep { config, data } => commands::vocab_sweep(config.as_deref(), &data, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
