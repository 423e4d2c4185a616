//! Greedy and beam-search decoding into canonical semantics strings.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelBundle, ModelError, Source};
use crate::nnet::{Ctx, LayerNorm, Linear, MultiHeadAttention};
use crate::semantics;
use crate::tensorcore::kernels::{log_softmax_tempered, softmax_row, LAYER_NORM_EPS};
use crate::tensorcore::{Graph, ParamStore, Scalar};
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    Width,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("max_len must be at least 1")]
    MaxLen,
    #[error("model has no output vocabulary")]
    NoVocab,
    #[error("cannot write predictions to {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

pub const DEFAULT_MAX_LEN: usize = 192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub width: usize,
    pub temperature: f64,
    pub max_len: usize,
    /// Final scores are divided by `len^alpha`; `0` disables normalization.
    pub len_norm_alpha: f64,
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            width: 32,
            temperature: 1.25,
            max_len: DEFAULT_MAX_LEN,
            len_norm_alpha: 0.0,
            greedy: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            width: 1,
            temperature: 1.0,
            max_len,
            len_norm_alpha: 0.0,
            greedy: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(DecodeError::Width);
        }
        if !(self.temperature > 0.0) {
            return Err(DecodeError::Temperature(self.temperature));
        }
        if self.max_len == 0 {
            return Err(DecodeError::MaxLen);
        }
        Ok(())
    }
}

/// Next-token logits for an autoregressive model.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// State with no tokens consumed.
    fn initial(&self) -> Self::State;

    /// Consumes `token` and returns logits for the following position.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// BOS-prefixed
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, BOS excluded, EOS included.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn normalized_score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.score
        } else {
            self.score / (self.generated().len().max(1) as f64).powf(alpha)
        }
    }
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
}

/// A live hypothesis with its scorer state and pending logits.
#[derive(Clone)]
pub struct Beam<S> {
    pub hyp: Hypothesis,
    state: S,
    logits: Vec<f32>,
}

/// Beam containing only BOS.
pub fn start<M: StepScorer>(scorer: &M) -> Result<Beam<M::State>> {
    let mut state = scorer.initial();
    let logits = scorer.step(&mut state, BOS)?;
    Ok(Beam {
        hyp: Hypothesis {
            tokens: vec![BOS],
            score: 0.0,
            finished: false,
        },
        state,
        logits,
    })
}

/// One expansion: every live beam over every token, keeping the best
/// `width` candidates. Returned hypotheses have not been stepped yet.
pub fn expand<S>(beams: &[Beam<S>], width: usize, temperature: f64) -> Vec<(usize, Hypothesis)> {
    let mut cands: Vec<(usize, Hypothesis)> = Vec::new();
    for (bi, b) in beams.iter().enumerate() {
        let lp = log_softmax_tempered(&b.logits, temperature as f32);
        for (tok, &l) in lp.iter().enumerate() {
            let mut tokens = b.hyp.tokens.clone();
            tokens.push(tok);
            cands.push((
                bi,
                Hypothesis {
                    tokens,
                    score: b.hyp.score + l as f64,
                    finished: tok == EOS,
                },
            ));
        }
    }
    cands.sort_by(|(_, a), (_, b)| rank(a.score, &a.tokens, b.score, &b.tokens));
    cands.truncate(width);
    cands
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Finished pool plus the live beams at the length limit.
    pub hypotheses: Vec<Hypothesis>,
}

/// Beam search over at most `max_len` generated tokens.
pub fn beam_search<M: StepScorer>(scorer: &M, cfg: &DecodeConfig) -> Result<BeamResult> {
    cfg.validate()?;
    let mut live = vec![start(scorer)?];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let last = step + 1 == cfg.max_len;
        let mut next = Vec::new();
        for (parent, hyp) in expand(&live, cfg.width, cfg.temperature) {
            if hyp.finished {
                pool.push(hyp);
            } else if last {
                next.push(Beam {
                    hyp,
                    state: live[parent].state.clone(),
                    logits: Vec::new(),
                });
            } else {
                let mut state = live[parent].state.clone();
                let tok = *hyp.tokens.last().unwrap();
                let logits = scorer.step(&mut state, tok)?;
                next.push(Beam { hyp, state, logits });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if cfg.len_norm_alpha == 0.0 {
            // Scores only decrease, so no live beam can overtake the best finished one.
            let best_done = pool.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|b| b.hyp.score < best_done) {
                break;
            }
        }
    }
    let mut hypotheses = pool;
    if hypotheses.is_empty() || live.iter().any(|b| b.logits.is_empty()) {
        hypotheses.extend(live.into_iter().map(|b| b.hyp));
    }
    let alpha = cfg.len_norm_alpha;
    let best = hypotheses
        .iter()
        .min_by(|a, b| rank(a.normalized_score(alpha), &a.tokens, b.normalized_score(alpha), &b.tokens))
        .cloned()
        .expect("beam search keeps at least one hypothesis");
    Ok(BeamResult { best, hypotheses })
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode<M: StepScorer>(scorer: &M, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(DecodeError::MaxLen);
    }
    let mut state = scorer.initial();
    let mut logits = scorer.step(&mut state, BOS)?;
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
    };
    for step in 0..max_len {
        let lp = log_softmax_tempered(&logits, 1.0);
        let mut tok = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[tok] {
                tok = i;
            }
        }
        hyp.tokens.push(tok);
        hyp.score += lp[tok] as f64;
        if tok == EOS {
            hyp.finished = true;
            break;
        }
        if step + 1 < max_len {
            logits = scorer.step(&mut state, tok)?;
        }
    }
    Ok(hyp)
}

pub fn decode<M: StepScorer>(scorer: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    if cfg.greedy {
        greedy_decode(scorer, cfg.max_len)
    } else {
        Ok(beam_search(scorer, cfg)?.best)
    }
}

fn linear_rows(x: &[f32], rows: usize, store: &ParamStore<f32>, l: &Linear) -> Vec<f32> {
    let w = &store.get(l.w).value;
    let b = store.get(l.b).value.data();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0f32; rows * dout];
    for r in 0..rows {
        out[r * dout..(r + 1) * dout].copy_from_slice(b);
    }
    f32::gemm(rows, din, dout, x, false, w.data(), false, &mut out, true);
    out
}

fn layer_norm(x: &[f32], store: &ParamStore<f32>, ln: &LayerNorm) -> Vec<f32> {
    let gamma = store.get(ln.gamma).value.data();
    let beta = store.get(ln.beta).value.data();
    let mut out = vec![0.0; x.len()];
    crate::tensorcore::kernels::layer_norm(x, gamma, beta, gamma.len(), LAYER_NORM_EPS as f32, &mut out, None);
    out
}

/// Single-query attention over `n` cached key/value rows.
fn attend(q: &[f32], k: &[f32], v: &[f32], n: usize, heads: usize) -> Vec<f32> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; d];
    let mut p = vec![0.0f32; n];
    for h in 0..heads {
        let c = h * dh;
        for j in 0..n {
            p[j] = crate::tensorcore::kernels::dot(&q[c..c + dh], &k[j * d + c..j * d + c + dh]) * scale;
        }
        softmax_row(&mut p);
        for j in 0..n {
            for (o, &vv) in out[c..c + dh].iter_mut().zip(&v[j * d + c..j * d + c + dh]) {
                *o += p[j] * vv;
            }
        }
    }
    out
}

fn add_into(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Self-attention key/value cache of one hypothesis.
#[derive(Debug, Clone, Default)]
pub struct DecoderCache {
    pos: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

/// Incremental decoder over a fixed encoder output.
pub struct ModelScorer<'a> {
    model: &'a ModelBundle,
    enc_len: usize,
    cross: Vec<(Vec<f32>, Vec<f32>)>,
}

impl<'a> ModelScorer<'a> {
    /// Encodes a single input and precomputes cross-attention keys/values.
    pub fn new(model: &'a ModelBundle, src: Source<'_>) -> Result<Self> {
        let mut g: Graph<f32> = Graph::no_grad();
        let (enc, layout) = model.encode(&mut g, &model.params, src, &mut Ctx::eval())?;
        if layout.batch != 1 {
            return Err(DecodeError::Model(ModelError::Config("scorer takes one input".into())));
        }
        let enc_len = layout.lens[0];
        let d = model.config.d_model;
        let states = &g.value(enc).data()[..enc_len * d];
        Ok(Self::from_states(model, states, enc_len))
    }

    /// Scorer over precomputed encoder states `[len, D]`.
    pub fn from_states(model: &'a ModelBundle, states: &[f32], enc_len: usize) -> Self {
        let cross = model
            .decoder
            .layers
            .iter()
            .map(|l| {
                let k = linear_rows(states, enc_len, &model.params, &l.cross_attn.k);
                let v = linear_rows(states, enc_len, &model.params, &l.cross_attn.v);
                (k, v)
            })
            .collect();
        Self { model, enc_len, cross }
    }

    fn mha_query(&self, x: &[f32], attn: &MultiHeadAttention, k: &[f32], v: &[f32], n: usize) -> Vec<f32> {
        let p = &self.model.params;
        let q = linear_rows(x, 1, p, &attn.q);
        let a = attend(&q, k, v, n, attn.heads);
        linear_rows(&a, 1, p, &attn.o)
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderCache;

    fn vocab_size(&self) -> usize {
        self.model.config.out_vocab
    }

    fn initial(&self) -> DecoderCache {
        let n = self.model.decoder.layers.len();
        DecoderCache {
            pos: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn step(&self, state: &mut DecoderCache, token: usize) -> Result<Vec<f32>> {
        let m = self.model;
        let p = &m.params;
        let d = m.config.d_model;
        if state.pos >= m.config.max_target_len || token >= m.config.out_vocab {
            return Err(DecodeError::Model(ModelError::Config(format!(
                "token {token} at position {} outside the decoder range",
                state.pos
            ))));
        }
        let dec = &m.decoder;
        let mut x: Vec<f32> = p.get(dec.embed).value.data()[token * d..(token + 1) * d].to_vec();
        add_into(&mut x, &p.get(dec.pos).value.data()[state.pos * d..(state.pos + 1) * d]);
        state.pos += 1;
        for (li, layer) in dec.layers.iter().enumerate() {
            let h = layer_norm(&x, p, &layer.self_norm);
            let k = linear_rows(&h, 1, p, &layer.self_attn.k);
            let v = linear_rows(&h, 1, p, &layer.self_attn.v);
            state.keys[li].extend_from_slice(&k);
            state.values[li].extend_from_slice(&v);
            let a = self.mha_query(&h, &layer.self_attn, &state.keys[li], &state.values[li], state.pos);
            add_into(&mut x, &a);

            let h = layer_norm(&x, p, &layer.cross_norm);
            let (ck, cv) = &self.cross[li];
            let a = self.mha_query(&h, &layer.cross_attn, ck, cv, self.enc_len);
            add_into(&mut x, &a);

            let h = layer_norm(&x, p, &layer.ffn.norm);
            let mut h = linear_rows(&h, 1, p, &layer.ffn.fc1);
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
            let h = linear_rows(&h, 1, p, &layer.ffn.fc2);
            add_into(&mut x, &h);
        }
        let x = layer_norm(&x, p, &dec.final_norm);
        Ok(linear_rows(&x, 1, p, &dec.out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// Canonical semantics string.
    pub prediction: String,
    pub score: f64,
}

/// Detokenizes generated ids and canonicalizes the result.
pub fn to_semantics(model: &ModelBundle, hyp: &Hypothesis) -> Result<String> {
    let raw = detokenize(model, hyp)?;
    Ok(semantics::canonicalize(&raw))
}

/// Raw decoded text, stopping at EOS.
pub fn detokenize(model: &ModelBundle, hyp: &Hypothesis) -> Result<String> {
    let vocab = model.out_vocab.as_ref().ok_or(DecodeError::NoVocab)?;
    vocab
        .decode(hyp.generated())
        .map_err(|e| DecodeError::Model(ModelError::Tokenizer(e)))
}

/// Decodes one input with `cfg`.
pub fn decode_source(model: &ModelBundle, src: Source<'_>, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let scorer = ModelScorer::new(model, src)?;
    decode(&scorer, cfg)
}

/// Plain prediction file: one canonical string per line.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&p.prediction);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// JSON-lines prediction file with `id`, `prediction` and `score`.
pub fn write_predictions_jsonl(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p).expect("prediction serializes");
        out.push(b'\n');
    }
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| DecodeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}
