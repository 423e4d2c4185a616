//! Feature files, JSON-lines manifests, the synthetic SLU task and the WER
//! noise channel used by the cascade experiments.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semantics::{self, Entity, SemanticsRecord};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEA1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: String, found: [u8; 4] },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("feature matrix is empty")]
    Empty,
    #[error("invalid feature matrix: {0}")]
    InvalidFeatures(String),
    #[error("{path}:{line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `T × D` frame sequence; frames at or beyond `valid_len` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: Vec<f32>,
    num_frames: usize,
    dim: usize,
    valid_len: usize,
}

impl FeatureMatrix {
    pub fn new(frames: Vec<f32>, num_frames: usize, dim: usize, valid_len: usize) -> Result<Self, DataError> {
        if num_frames == 0 || dim == 0 {
            return Err(DataError::Empty);
        }
        if frames.len() != num_frames * dim {
            return Err(DataError::InvalidFeatures(format!(
                "{} values for {num_frames}×{dim}",
                frames.len()
            )));
        }
        if valid_len > num_frames {
            return Err(DataError::InvalidFeatures(format!(
                "valid length {valid_len} exceeds {num_frames} frames"
            )));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(DataError::InvalidFeatures("non-finite value".into()));
        }
        Ok(Self {
            frames,
            num_frames,
            dim,
            valid_len,
        })
    }

    /// All frames valid.
    pub fn dense(frames: Vec<f32>, dim: usize) -> Result<Self, DataError> {
        let t = if dim == 0 { 0 } else { frames.len() / dim };
        Self::new(frames, t, dim, t)
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    /// Copy extended with `extra` padding frames filled with `value`.
    pub fn padded(&self, extra: usize, value: f32) -> Self {
        let mut frames = self.frames.clone();
        frames.extend(std::iter::repeat(value).take(extra * self.dim));
        Self {
            frames,
            num_frames: self.num_frames + extra,
            dim: self.dim,
            valid_len: self.valid_len,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.frames.len());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [self.num_frames, self.dim, self.valid_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, DataError> {
        if bytes.len() < 16 {
            return Err(DataError::Truncated {
                path: path.into(),
                expected: 16,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != FEATURE_MAGIC {
            return Err(DataError::BadMagic {
                path: path.into(),
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (t, d, valid) = (word(0), word(1), word(2));
        let expected = 16 + 4 * t * d;
        if bytes.len() != expected {
            return Err(DataError::Truncated {
                path: path.into(),
                expected,
                found: bytes.len(),
            });
        }
        let frames = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, t, d, valid)
    }
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<(), DataError> {
    fs::write(path, f.to_bytes()).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    FeatureMatrix::from_bytes(&bytes, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Relative to the manifest's directory.
    pub features: String,
    pub transcript: String,
    pub semantics: String,
    pub duration_frames: usize,
}

/// One loaded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub transcript: String,
    pub semantics: SemanticsRecord,
}

impl Utterance {
    pub fn semantics_string(&self) -> String {
        self.semantics.flatten()
    }
}

/// Reads and validates a JSON-lines manifest, loading every feature file.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let pname = path.display().to_string();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let bad = |msg: String| DataError::Manifest {
            path: pname.clone(),
            line: n + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| bad(format!("invalid row: {e}")))?;
        let canon = semantics::canonicalize(&row.semantics);
        if canon != row.semantics {
            return Err(bad(format!("semantics is not canonical (expected {canon:?})")));
        }
        let fpath = base.join(&row.features);
        let features = read_features(&fpath).map_err(|e| bad(e.to_string()))?;
        if features.num_frames() != row.duration_frames {
            return Err(bad(format!(
                "duration_frames {} but feature file has {} frames",
                row.duration_frames,
                features.num_frames()
            )));
        }
        out.push(Utterance {
            id: row.id,
            features,
            transcript: row.transcript,
            semantics: semantics::parse(&row.semantics),
        });
    }
    Ok(out)
}

/// Writes utterances as `<dir>/<split>.jsonl` plus `<dir>/features/<id>.fea`.
pub fn write_manifest(dir: &Path, split: &str, utts: &[Utterance]) -> Result<PathBuf, DataError> {
    let fdir = dir.join("features");
    fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
    let mpath = dir.join(format!("{split}.jsonl"));
    let mut file = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    for u in utts {
        let rel = format!("features/{}.fea", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        let row = ManifestRow {
            id: u.id.clone(),
            features: rel,
            transcript: u.transcript.clone(),
            semantics: u.semantics_string(),
            duration_frames: u.features.num_frames(),
        };
        writeln!(file, "{}", serde_json::to_string(&row).expect("row serializes")).map_err(io_err(&mpath))?;
    }
    Ok(mpath)
}

// ---------------------------------------------------------------------------
// synthetic task

const SCENARIOS: &[(&str, &[&str])] = &[
    ("alarm", &["alarm", "wake up call"]),
    ("weather", &["weather", "forecast"]),
    ("music", &["music", "song"]),
    ("calendar", &["calendar", "meeting"]),
    ("email", &["email", "inbox"]),
    ("lists", &["list", "shopping list"]),
    ("iot", &["lights", "lamp"]),
    ("news", &["news", "headlines"]),
    ("transport", &["train", "taxi"]),
    ("cooking", &["recipe", "kitchen timer"]),
];

const ACTIONS: &[(&str, &[&str])] = &[
    ("set", &["set", "schedule"]),
    ("query", &["check", "what is"]),
    ("remove", &["remove", "cancel"]),
    ("play", &["play", "start"]),
    ("create", &["create", "make"]),
    ("stop", &["stop", "pause"]),
    ("send", &["send", "forward"]),
    ("change", &["change", "adjust"]),
];

const SLOTS: &[(&str, &str, &[&str])] = &[
    (
        "time",
        "at",
        &["five am", "noon", "six thirty", "midnight", "seven pm", "ten fifteen", "eight", "half past nine", "two pm", "eleven"],
    ),
    (
        "date",
        "on",
        &["monday", "friday", "today", "tomorrow", "the weekend", "sunday", "march third", "next week", "tuesday", "new year"],
    ),
    (
        "place_name",
        "in",
        &["london", "paris", "boston", "tokyo", "the office", "berlin", "the garden", "madrid", "new york", "the kitchen"],
    ),
    (
        "person",
        "with",
        &["john", "mary", "alice", "bob", "my mother", "peter", "the team", "susan", "my boss", "david"],
    ),
    (
        "device_type",
        "for",
        &["speaker", "phone", "television", "tablet", "the radio", "laptop", "heater", "the fan", "camera", "watch"],
    ),
    (
        "color_type",
        "in color",
        &["red", "blue", "green", "yellow", "purple", "warm white", "orange", "pink", "cyan", "gold"],
    ),
];

const OPENERS: &[&str] = &["", "", "please", "hey", "could you", "i want to", "can you", "now"];

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_scenarios: usize,
    pub n_actions: usize,
    pub slot_types: usize,
    /// Distinct filler phrases per slot type.
    pub word_vocab: usize,
    pub max_entities: usize,
    pub train_samples: usize,
    pub dev_samples: usize,
    pub test_samples: usize,
    /// Extra transcript-labelled utterances for encoder pretraining,
    /// disjoint from the other splits.
    pub asr_samples: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            n_scenarios: 6,
            n_actions: 4,
            slot_types: 5,
            word_vocab: 8,
            max_entities: 2,
            train_samples: 500,
            dev_samples: 100,
            test_samples: 100,
            asr_samples: 2000,
            feature_dim: 16,
            frames_per_token: 4,
            noise_sigma: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        let counts = [
            ("n_scenarios", self.n_scenarios),
            ("n_actions", self.n_actions),
            ("slot_types", self.slot_types),
            ("word_vocab", self.word_vocab),
            ("feature_dim", self.feature_dim),
            ("frames_per_token", self.frames_per_token),
            ("train_samples", self.train_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_scenarios > SCENARIOS.len() {
            return bad(format!("vocab too small: at most {} scenarios available", SCENARIOS.len()));
        }
        if self.n_actions > ACTIONS.len() {
            return bad(format!("vocab too small: at most {} actions available", ACTIONS.len()));
        }
        if self.slot_types > SLOTS.len() {
            return bad(format!("vocab too small: at most {} slot types available", SLOTS.len()));
        }
        let max_fillers = SLOTS.iter().map(|s| s.2.len()).min().unwrap();
        if self.word_vocab > max_fillers {
            return bad(format!("vocab too small: at most {max_fillers} fillers per slot available"));
        }
        if self.max_entities > self.slot_types {
            return bad(format!(
                "max_entities {} exceeds slot_types {}",
                self.max_entities, self.slot_types
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Word inventory with one fixed embedding ("codebook" vector) per word.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub words: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

impl Codebook {
    pub fn index(&self, word: &str) -> Option<usize> {
        self.words.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }

    pub fn vector(&self, word: &str) -> Option<&[f32]> {
        self.index(word).map(|i| self.vectors[i].as_slice())
    }

    /// Closest codebook word to `v` in Euclidean distance.
    pub fn nearest(&self, v: &[f32]) -> &str {
        let dist = |c: &Vec<f32>| c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        let best = (0..self.words.len())
            .min_by(|&a, &b| dist(&self.vectors[a]).total_cmp(&dist(&self.vectors[b])))
            .expect("non-empty codebook");
        &self.words[best]
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub codebook: Codebook,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub asr: Vec<Utterance>,
}

impl SynthData {
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            "asr" => Some(&self.asr),
            _ => None,
        }
    }
}

fn words_of(phrase: &str) -> impl Iterator<Item = &str> {
    phrase.split_whitespace()
}

/// Renders word-level features: each word's codebook vector repeated
/// `frames_per_token` times, plus Gaussian noise.
pub fn render_features(
    transcript: &str,
    codebook: &Codebook,
    frames_per_token: usize,
    sigma: f32,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMatrix, DataError> {
    let dim = codebook.vectors.first().map_or(0, Vec::len);
    let noise = Normal::new(0.0f32, sigma.max(0.0)).map_err(|e| DataError::Config(e.to_string()))?;
    let mut frames = Vec::new();
    for w in transcript.split_whitespace() {
        let v = codebook
            .vector(w)
            .ok_or_else(|| DataError::Config(format!("word {w:?} not in codebook")))?;
        for _ in 0..frames_per_token {
            frames.extend(v.iter().map(|&x| if sigma > 0.0 { x + noise.sample(rng) } else { x }));
        }
    }
    FeatureMatrix::dense(frames, dim)
}

/// Generates the full synthetic dataset in memory. Deterministic in `cfg`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthData, DataError> {
    cfg.validate()?;
    let scenarios = &SCENARIOS[..cfg.n_scenarios];
    let actions = &ACTIONS[..cfg.n_actions];
    let slots = &SLOTS[..cfg.slot_types];

    let mut vocab: BTreeSet<&str> = BTreeSet::new();
    vocab.insert("the");
    for p in OPENERS {
        vocab.extend(words_of(p));
    }
    for (_, phrases) in scenarios.iter().chain(actions) {
        for p in phrases.iter() {
            vocab.extend(words_of(p));
        }
    }
    for (_, prep, fillers) in slots {
        vocab.extend(words_of(prep));
        for f in &fillers[..cfg.word_vocab] {
            vocab.extend(words_of(f));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<String> = vocab.into_iter().map(String::from).collect();
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    let vectors = words
        .iter()
        .map(|_| (0..cfg.feature_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let codebook = Codebook { words, vectors };

    let make_split = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Utterance>, DataError> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (scenario, s_phr) = scenarios[rng.gen_range(0..scenarios.len())];
            let (action, a_phr) = actions[rng.gen_range(0..actions.len())];
            let mut words: Vec<&str> = Vec::new();
            words.extend(words_of(OPENERS[rng.gen_range(0..OPENERS.len())]));
            words.extend(words_of(a_phr[rng.gen_range(0..a_phr.len())]));
            if rng.gen_bool(0.5) {
                words.push("the");
            }
            words.extend(words_of(s_phr[rng.gen_range(0..s_phr.len())]));
            let n_ent = rng.gen_range(0..=cfg.max_entities);
            let mut slot_ids: Vec<usize> = (0..slots.len()).collect();
            slot_ids.shuffle(rng);
            let mut entities = Vec::new();
            for &s in &slot_ids[..n_ent] {
                let (kind, prep, fillers) = slots[s];
                let filler = fillers[rng.gen_range(0..cfg.word_vocab)];
                words.extend(words_of(prep));
                words.extend(words_of(filler));
                entities.push(Entity::new(kind, filler));
            }
            let transcript = words.join(" ");
            let features = render_features(&transcript, &codebook, cfg.frames_per_token, cfg.noise_sigma, rng)?;
            out.push(Utterance {
                id: format!("{prefix}-{i:05}"),
                features,
                transcript,
                semantics: SemanticsRecord::new(scenario, action, entities),
            });
        }
        Ok(out)
    };
    let train = make_split("train", cfg.train_samples, &mut rng)?;
    let dev = make_split("dev", cfg.dev_samples, &mut rng)?;
    let test = make_split("test", cfg.test_samples, &mut rng)?;
    let asr = make_split("asr", cfg.asr_samples, &mut rng)?;
    Ok(SynthData {
        codebook,
        train,
        dev,
        test,
        asr,
    })
}

/// Generates the dataset and writes `train/dev/test/asr.jsonl` with features
/// under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthData, DataError> {
    let data = synth_dataset(cfg)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (name, split) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test), ("asr", &data.asr)] {
        if name == "train" || !split.is_empty() {
            write_manifest(out_dir, name, split)?;
        }
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// WER channel

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Substitute,
    Delete,
    Insert,
}

/// Word-level noise channel: each word independently receives one edit
/// with probability `target_wer`, drawn uniformly from `ops`.
#[derive(Debug, Clone)]
pub struct WerChannel {
    pub target_wer: f64,
    pub vocabulary: Vec<String>,
    pub ops: Vec<EditOp>,
}

impl WerChannel {
    pub fn new(target_wer: f64, vocabulary: Vec<String>) -> Result<Self, DataError> {
        if !(0.0..=1.0).contains(&target_wer) {
            return Err(DataError::Config(format!("target WER {target_wer} outside [0, 1]")));
        }
        if vocabulary.is_empty() && target_wer > 0.0 {
            return Err(DataError::Config("WER channel needs a non-empty vocabulary".into()));
        }
        Ok(Self {
            target_wer,
            vocabulary,
            ops: vec![EditOp::Substitute, EditOp::Delete, EditOp::Insert],
        })
    }

    pub fn with_ops(mut self, ops: Vec<EditOp>) -> Self {
        self.ops = ops;
        self
    }

    fn random_word(&self, rng: &mut ChaCha8Rng, avoid: Option<&str>) -> String {
        let candidates = self.vocabulary.len() - usize::from(avoid.is_some_and(|a| self.vocabulary.iter().any(|w| w == a)));
        if candidates == 0 {
            return self.vocabulary[0].clone();
        }
        loop {
            let w = &self.vocabulary[rng.gen_range(0..self.vocabulary.len())];
            if Some(w.as_str()) != avoid {
                return w.clone();
            }
        }
    }

    pub fn corrupt(&self, transcript: &str, rng: &mut ChaCha8Rng) -> String {
        if self.target_wer == 0.0 || self.ops.is_empty() {
            return transcript.to_string();
        }
        let words: Vec<&str> = transcript.split_whitespace().collect();
        if words.is_empty() {
            // the only possible edit on an empty reference is an insertion
            if self.ops.contains(&EditOp::Insert) && rng.gen_bool(self.target_wer) {
                return self.random_word(rng, None);
            }
            return String::new();
        }
        let mut out: Vec<String> = Vec::with_capacity(words.len() + 4);
        for w in words {
            if !rng.gen_bool(self.target_wer) {
                out.push(w.to_string());
                continue;
            }
            match self.ops[rng.gen_range(0..self.ops.len())] {
                EditOp::Substitute => out.push(self.random_word(rng, Some(w))),
                EditOp::Delete => {}
                EditOp::Insert => {
                    out.push(w.to_string());
                    out.push(self.random_word(rng, None));
                }
            }
        }
        out.join(" ")
    }
}

/// Convenience wrapper around [`WerChannel`] with its own seeded RNG.
pub fn wer_channel(transcript: &str, target_wer: f64, vocabulary: &[String], seed: u64) -> Result<String, DataError> {
    let ch = WerChannel::new(target_wer, vocabulary.to_vec())?;
    Ok(ch.corrupt(transcript, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Word-level Levenshtein distance.
pub fn word_edit_distance(reference: &[&str], hypothesis: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        edits += word_edit_distance(&rw, &hw);
        words += rw.len();
    }
    if words == 0 {
        0.0
    } else {
        edits as f64 / words as f64
    }
}
