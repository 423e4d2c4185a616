use std::path::Path;

use serde::{Deserialize, Serialize};
use sicsf_core::data::SynthConfig;
use sicsf_core::decoding::DecodeConfig;
use sicsf_core::model::ModelConfig;
use sicsf_core::training::TrainConfig;

use crate::CliError;

/// Tokenizer sizes, the synthetic task and experiment sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Output pieces of the end-to-end model (specials excluded).
    pub vocab_size: usize,
    /// Output pieces of the transcript model used for encoder pretraining.
    pub transcript_vocab_size: usize,
    pub nlu_in_vocab_size: usize,
    pub nlu_out_vocab_size: usize,
    pub vocab_sweep: Vec<usize>,
    /// Default WER points for `cascade-eval`.
    pub wer_sweep: Vec<f64>,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            transcript_vocab_size: 256,
            nlu_in_vocab_size: 256,
            nlu_out_vocab_size: 256,
            vocab_sweep: vec![58, 256, 512, 1024],
            wer_sweep: vec![0.0, 0.235],
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            decode: DecodeConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Parses `text` as an overlay on [`RunConfig::default`]: keys absent
    /// from `text` keep their default values, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, String> {
        let user: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut base = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut base, user);
        toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_reparses_to_the_same_config() {
        let mut c = RunConfig::default();
        c.train.warmup_steps = Some(10);
        c.model.adapter.enabled = true;
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_toml()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[model]\nd_modle = 3\n").is_err());
        assert!(RunConfig::parse("[extra]\n").is_err());
        assert!(RunConfig::parse("[data.synth]\nsamples = 1\n").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse("[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::desk().batch_size);
        assert_eq!(c.decode.width, 32);
    }
}
