//! Glue between data, tokenizers, training and decoding shared by the CLI
//! and the experiment harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{word_edit_distance, DataError, Utterance, WerChannel};
use crate::decoding::{self, DecodeConfig, Prediction};
use crate::metrics::{self, EvalReport};
use crate::model::{build_model, build_nlu_model, ModelBundle, ModelConfig, ModelError, Source};
use crate::semantics::{self, SemanticsRecord};
use crate::tokenizer::{train_tokenizer, TokenizerError, Vocab};
use crate::training::{self, Control, DevScores, Example, SourceData, TrainConfig, TrainLog};

/// What a speech model is trained to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Semantics,
    Transcript,
}

impl Target {
    pub fn text(self, u: &Utterance) -> String {
        match self {
            Target::Semantics => u.semantics_string(),
            Target::Transcript => u.transcript.clone(),
        }
    }
}

pub fn target_vocab(utts: &[Utterance], target: Target, vocab_size: usize) -> Result<Vocab, TokenizerError> {
    let corpus: Vec<String> = utts.iter().map(|u| target.text(u)).collect();
    train_tokenizer(&corpus, vocab_size)
}

pub fn speech_examples(utts: &[Utterance], vocab: &Vocab, target: Target) -> Vec<Example> {
    utts.iter()
        .map(|u| Example {
            source: SourceData::Features(u.features.clone()),
            target: vocab.encode(&target.text(u), true),
        })
        .collect()
}

/// NLU examples: transcript tokens in, semantics tokens out.
pub fn text_examples(transcripts: &[String], semantics: &[String], in_vocab: &Vocab, out_vocab: &Vocab) -> Vec<Example> {
    transcripts
        .iter()
        .zip(semantics)
        .map(|(t, s)| Example {
            source: SourceData::Tokens(text_source(in_vocab, t)),
            target: out_vocab.encode(s, true),
        })
        .collect()
}

/// Encoder tokens for a transcript; an empty transcript becomes `[UNK]`.
pub fn text_source(vocab: &Vocab, transcript: &str) -> Vec<usize> {
    let ids = vocab.encode(transcript, false);
    if ids.is_empty() {
        vec![crate::tokenizer::UNK]
    } else {
        ids
    }
}

pub fn sources_of(utts: &[Utterance]) -> Vec<SourceData> {
    utts.iter().map(|u| SourceData::Features(u.features.clone())).collect()
}

/// Decodes one source into a hypothesis.
pub fn decode_one(model: &ModelBundle, src: &SourceData, cfg: &DecodeConfig) -> decoding::Result<decoding::Hypothesis> {
    match src {
        SourceData::Features(f) => decoding::decode_source(model, Source::Features(&[f]), cfg),
        SourceData::Tokens(t) => decoding::decode_source(model, Source::Tokens(&[t.as_slice()]), cfg),
    }
}

/// Canonical semantics predictions, in input order.
pub fn predict(model: &ModelBundle, ids: &[String], sources: &[SourceData], cfg: &DecodeConfig) -> decoding::Result<Vec<Prediction>> {
    ids.iter()
        .zip(sources)
        .map(|(id, src)| {
            let hyp = decode_one(model, src, cfg)?;
            Ok(Prediction {
                id: id.clone(),
                prediction: decoding::to_semantics(model, &hyp)?,
                score: hyp.score,
            })
        })
        .collect()
}

pub fn evaluate_predictions(preds: &[Prediction], golds: &[SemanticsRecord]) -> Result<EvalReport, metrics::MetricsError> {
    let parsed: Vec<SemanticsRecord> = preds.iter().map(|p| semantics::parse(&p.prediction)).collect();
    metrics::evaluate(&parsed, golds)
}

/// Intent accuracy and exact-match entity F1.
pub fn dev_scores(model: &ModelBundle, sources: &[SourceData], golds: &[SemanticsRecord], cfg: &DecodeConfig) -> decoding::Result<DevScores> {
    let ids: Vec<String> = (0..sources.len()).map(|i| i.to_string()).collect();
    let preds = predict(model, &ids, sources, cfg)?;
    let parsed: Vec<SemanticsRecord> = preds.iter().map(|p| semantics::parse(&p.prediction)).collect();
    let intent_accuracy = metrics::intent_accuracy(&parsed, golds).expect("equal lengths");
    let f1 = metrics::entity_prf_exact(&parsed, golds).expect("equal lengths").f1;
    Ok(DevScores { intent_accuracy, f1 })
}

/// Word accuracy `1 - WER` of greedy transcripts against references.
pub fn word_accuracy(model: &ModelBundle, utts: &[Utterance], max_len: usize) -> decoding::Result<f64> {
    let cfg = DecodeConfig::greedy(max_len);
    let (mut errors, mut words) = (0usize, 0usize);
    for u in utts {
        let hyp = decode_one(model, &SourceData::Features(u.features.clone()), &cfg)?;
        let text = decoding::detokenize(model, &hyp)?;
        let r: Vec<&str> = u.transcript.split_whitespace().collect();
        let h: Vec<&str> = text.split_whitespace().collect();
        errors += word_edit_distance(&r, &h);
        words += r.len();
    }
    Ok(1.0 - errors as f64 / words.max(1) as f64)
}

/// Dev-set monitoring during training.
pub struct DevMonitor<'a> {
    pub sources: &'a [SourceData],
    pub golds: &'a [SemanticsRecord],
    pub decode: DecodeConfig,
    /// Stop once both `(intent accuracy, F1)` thresholds are met.
    pub stop_at: Option<(f64, f64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Decode(#[from] decoding::DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

/// Trains with optional per-epoch dev scoring.
pub fn train_monitored(
    model: &mut ModelBundle,
    data: &[Example],
    cfg: &TrainConfig,
    monitor: Option<&DevMonitor<'_>>,
) -> Result<TrainLog, PipelineError> {
    let mut failure = None;
    let log = training::train(model, data, cfg, |m, _| {
        let Some(mon) = monitor else {
            return (None, Control::Continue);
        };
        match dev_scores(m, mon.sources, mon.golds, &mon.decode) {
            Ok(s) => {
                let done = mon.stop_at.is_some_and(|(a, f)| s.intent_accuracy >= a && s.f1 >= f);
                (Some(s), if done { Control::Stop } else { Control::Continue })
            }
            Err(e) => {
                failure = Some(e);
                (None, Control::Stop)
            }
        }
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(log),
    }
}

/// Speech model sized for `vocab` and the feature dimension of the data.
pub fn speech_model(cfg: &ModelConfig, vocab: Vocab, feat_dim: usize, seed: u64) -> Result<ModelBundle, ModelError> {
    let cfg = ModelConfig {
        feat_dim,
        out_vocab: vocab.len(),
        ..cfg.clone()
    };
    let mut m = build_model(&cfg, seed)?;
    m.out_vocab = Some(vocab);
    Ok(m)
}

/// Cascade NLU model: 3 text-encoder and 3 decoder layers, other sizes from `cfg`.
pub fn nlu_model(cfg: &ModelConfig, in_vocab: Vocab, out_vocab: Vocab, seed: u64) -> Result<ModelBundle, ModelError> {
    let cfg = ModelConfig {
        n_enc_layers: 3,
        n_dec_layers: 3,
        in_vocab: in_vocab.len(),
        out_vocab: out_vocab.len(),
        adapter: Default::default(),
        ..cfg.clone()
    };
    let mut m = build_nlu_model(&cfg, seed)?;
    m.in_vocab = Some(in_vocab);
    m.out_vocab = Some(out_vocab);
    Ok(m)
}

/// Encoder inputs for `utts` in the form `model` expects: features for a
/// speech model, transcript tokens for an NLU model.
pub fn model_sources(model: &ModelBundle, utts: &[Utterance]) -> Vec<SourceData> {
    match &model.in_vocab {
        Some(v) => utts.iter().map(|u| SourceData::Tokens(text_source(v, &u.transcript))).collect(),
        None => sources_of(utts),
    }
}

/// Passes every transcript through one seeded WER channel.
pub fn corrupt_transcripts(utts: &[Utterance], wer: f64, vocabulary: &[String], seed: u64) -> Result<Vec<String>, DataError> {
    let ch = WerChannel::new(wer, vocabulary.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(utts.iter().map(|u| ch.corrupt(&u.transcript, &mut rng)).collect())
}

/// Sorted distinct words of the transcripts.
pub fn transcript_words(utts: &[Utterance]) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = utts.iter().flat_map(|u| u.transcript.split_whitespace()).collect();
    set.into_iter().map(String::from).collect()
}

/// NLU tokenizers (transcripts in, semantics out) and a fresh model.
pub fn build_cascade_nlu(
    train: &[Utterance],
    cfg: &ModelConfig,
    in_size: usize,
    out_size: usize,
    seed: u64,
) -> Result<ModelBundle, PipelineError> {
    let in_vocab = target_vocab(train, Target::Transcript, in_size)?;
    let out_vocab = target_vocab(train, Target::Semantics, out_size)?;
    Ok(nlu_model(cfg, in_vocab, out_vocab, seed)?)
}

/// Clean transcript → semantics examples for an NLU model.
pub fn nlu_examples(model: &ModelBundle, utts: &[Utterance]) -> Vec<Example> {
    let transcripts: Vec<String> = utts.iter().map(|u| u.transcript.clone()).collect();
    let semantics: Vec<String> = utts.iter().map(|u| u.semantics_string()).collect();
    let in_vocab = model.in_vocab.as_ref().expect("NLU model has an input vocabulary");
    let out_vocab = model.out_vocab.as_ref().expect("NLU model has an output vocabulary");
    text_examples(&transcripts, &semantics, in_vocab, out_vocab)
}

/// One cascade operating point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CascadePoint {
    pub target_wer: f64,
    pub measured_wer: f64,
    pub report: EvalReport,
}

/// Scores the NLU model on `utts` whose transcripts went through the WER
/// channel at `wer`.
pub fn cascade_point(
    nlu: &ModelBundle,
    utts: &[Utterance],
    wer: f64,
    vocabulary: &[String],
    seed: u64,
    cfg: &DecodeConfig,
) -> Result<CascadePoint, PipelineError> {
    let noisy = corrupt_transcripts(utts, wer, vocabulary, seed)?;
    let in_vocab = nlu.in_vocab.as_ref().ok_or(decoding::DecodeError::NoVocab)?;
    let sources: Vec<SourceData> = noisy.iter().map(|t| SourceData::Tokens(text_source(in_vocab, t))).collect();
    let ids: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
    let preds = predict(nlu, &ids, &sources, cfg)?;
    let golds: Vec<SemanticsRecord> = utts.iter().map(|u| u.semantics.clone()).collect();
    let measured_wer = crate::data::corpus_wer(utts.iter().zip(&noisy).map(|(u, n)| (u.transcript.as_str(), n.as_str())));
    Ok(CascadePoint {
        target_wer: wer,
        measured_wer,
        report: evaluate_predictions(&preds, &golds)?,
    })
}
