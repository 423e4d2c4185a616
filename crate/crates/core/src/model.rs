//! Model assembly: the Conformer-encoder/Transformer-decoder speech model,
//! the text-to-semantics NLU model used by the cascade, parameter
//! bookkeeping, encoder freezing and the checkpoint format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureMatrix;
use crate::nnet::{
    Batch, ConformerLayer, Ctx, DecoderLayer, Init, LayerNorm, Linear, Subsample, TransformerEncoderLayer,
};
use crate::tensorcore::{Graph, ParamId, ParamStore, Scalar, TensorError, Var};
use crate::tokenizer::{TokenizerError, Vocab, PAD};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SICSFCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub enabled: bool,
    pub bottleneck: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            bottleneck: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    pub adapter: AdapterConfig,
    /// Decoder vocabulary, specials included.
    pub out_vocab: usize,
    /// Text-encoder vocabulary of the NLU model, specials included.
    pub in_vocab: usize,
    pub max_target_len: usize,
    pub max_source_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 3,
            heads: 4,
            conv_kernel: 9,
            subsample_factor: 4,
            adapter: AdapterConfig::default(),
            out_vocab: 260,
            in_vocab: 0,
            max_target_len: 192,
            max_source_len: 256,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    /// Conformer-large sized encoder with the 3-layer decoder.
    pub fn paper_scale() -> Self {
        Self {
            feat_dim: 80,
            d_model: 512,
            n_enc_layers: 17,
            n_dec_layers: 3,
            heads: 8,
            conv_kernel: 31,
            subsample_factor: 4,
            adapter: AdapterConfig {
                enabled: false,
                bottleneck: 32,
            },
            out_vocab: 62,
            in_vocab: 0,
            max_target_len: 192,
            max_source_len: 512,
            dropout: 0.1,
        }
    }

    /// The cascade NLU model: 3 text-encoder and 3 decoder layers.
    pub fn nlu(in_vocab: usize, out_vocab: usize) -> Self {
        Self {
            n_enc_layers: 3,
            n_dec_layers: 3,
            in_vocab,
            out_vocab,
            ..Self::default()
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let mut errs = Vec::new();
        if self.d_model == 0 {
            errs.push("d_model must be positive".to_string());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            errs.push(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.n_dec_layers == 0 {
            errs.push("n_dec_layers must be positive".into());
        }
        if self.out_vocab <= crate::tokenizer::NUM_SPECIALS {
            errs.push(format!("out_vocab {} leaves no room beyond the specials", self.out_vocab));
        }
        if self.max_target_len == 0 {
            errs.push("max_target_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.adapter.enabled && (self.adapter.bottleneck == 0 || 4 * self.adapter.bottleneck > self.d_model) {
            errs.push(format!(
                "adapter bottleneck {} must be in 1..={}",
                self.adapter.bottleneck,
                self.d_model / 4
            ));
        }
        match kind {
            ModelKind::Speech => {
                if self.feat_dim == 0 {
                    errs.push("feat_dim must be positive".into());
                }
                if self.conv_kernel % 2 == 0 {
                    errs.push(format!("conv_kernel {} must be odd", self.conv_kernel));
                }
                if ![1, 2, 4].contains(&self.subsample_factor) {
                    errs.push(format!("subsample_factor {} not in {{1, 2, 4}}", self.subsample_factor));
                }
            }
            ModelKind::Text => {
                if self.in_vocab <= crate::tokenizer::NUM_SPECIALS {
                    errs.push(format!("in_vocab {} leaves no room beyond the specials", self.in_vocab));
                }
                if self.max_source_len == 0 {
                    errs.push("max_source_len must be positive".into());
                }
                if self.adapter.enabled {
                    errs.push("adapters are only defined for the Conformer encoder".into());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(errs.join("; ")))
        }
    }

    fn adapter_bottleneck(&self) -> Option<usize> {
        self.adapter.enabled.then_some(self.adapter.bottleneck)
    }

    /// Parameter counts by group, computed from the layer shapes.
    pub fn param_counts(&self, kind: ModelKind) -> ParamCounts {
        let d = self.d_model;
        let (encoder, adapters) = match kind {
            ModelKind::Speech => {
                let layer = ConformerLayer::num_params(d, self.heads, self.conv_kernel, None);
                let adapters = self
                    .adapter_bottleneck()
                    .map_or(0, |b| 2 * crate::nnet::Adapter::num_params(d, b));
                (
                    Subsample::num_params(self.feat_dim, d, self.subsample_factor) + self.n_enc_layers * layer,
                    self.n_enc_layers * adapters,
                )
            }
            ModelKind::Text => (
                (self.in_vocab + self.max_source_len) * d
                    + self.n_enc_layers * TransformerEncoderLayer::num_params(d, self.heads)
                    + LayerNorm::num_params(d),
                0,
            ),
        };
        let decoder = (self.out_vocab + self.max_target_len) * d
            + self.n_dec_layers * DecoderLayer::num_params(d, self.heads)
            + LayerNorm::num_params(d)
            + Linear::num_params(d, self.out_vocab);
        ParamCounts {
            encoder,
            adapters,
            decoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    /// Encoder parameters excluding adapters.
    pub encoder: usize,
    pub adapters: usize,
    pub decoder: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.adapters + self.decoder
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Acoustic features in, semantics out.
    Speech,
    /// Transcript tokens in, semantics out (cascade NLU).
    Text,
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Conformer {
        subsample: Subsample,
        layers: Vec<ConformerLayer>,
    },
    Text {
        embed: ParamId,
        pos: ParamId,
        layers: Vec<TransformerEncoderLayer>,
        final_norm: LayerNorm,
    },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub out: Linear,
}

/// Encoder input for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Features(&'a [&'a FeatureMatrix]),
    /// Unpadded token sequences.
    Tokens(&'a [&'a [usize]]),
}

/// Weights, layer structure, flags, config and tokenizers of one model.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub out_vocab: Option<Vocab>,
    pub in_vocab: Option<Vocab>,
}

fn is_adapter(name: &str) -> bool {
    name.contains(".adapter_")
}

/// Speech model with seeded initialization.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    build(cfg, ModelKind::Speech, seed)
}

/// Cascade NLU model with seeded initialization.
pub fn build_nlu_model(cfg: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    build(cfg, ModelKind::Text, seed)
}

pub fn build(cfg: &ModelConfig, kind: ModelKind, seed: u64) -> Result<ModelBundle> {
    cfg.validate(kind)?;
    let mut params = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // adapters draw from a separate stream so enabling them leaves every
    // other initial weight unchanged
    let mut adapter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e25);
    let d = cfg.d_model;
    let encoder = {
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        match kind {
            ModelKind::Speech => {
                let subsample = Subsample::new(&mut init, "encoder.subsample", cfg.feat_dim, d, cfg.subsample_factor)?;
                let mut layers = Vec::with_capacity(cfg.n_enc_layers);
                for i in 0..cfg.n_enc_layers {
                    let mut layer = ConformerLayer::new(&mut init, &format!("encoder.layers.{i}"), d, cfg.heads, cfg.conv_kernel, None)?;
                    if let Some(b) = cfg.adapter_bottleneck() {
                        let mut ainit = Init {
                            store: &mut *init.store,
                            rng: &mut adapter_rng,
                        };
                        layer.adapter_attn = Some(crate::nnet::Adapter::new(&mut ainit, &format!("encoder.layers.{i}.adapter_attn"), d, b)?);
                        layer.adapter_conv = Some(crate::nnet::Adapter::new(&mut ainit, &format!("encoder.layers.{i}.adapter_conv"), d, b)?);
                    }
                    layers.push(layer);
                }
                Encoder::Conformer { subsample, layers }
            }
            ModelKind::Text => {
                let embed = init.uniform("encoder.embed", d, vec![cfg.in_vocab, d])?;
                let pos = init.uniform("encoder.pos", d, vec![cfg.max_source_len, d])?;
                let layers = (0..cfg.n_enc_layers)
                    .map(|i| TransformerEncoderLayer::new(&mut init, &format!("encoder.layers.{i}"), d, cfg.heads))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let final_norm = LayerNorm::new(&mut init, "encoder.final_norm", d)?;
                Encoder::Text {
                    embed,
                    pos,
                    layers,
                    final_norm,
                }
            }
        }
    };
    let decoder = {
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let embed = init.uniform("decoder.embed", d, vec![cfg.out_vocab, d])?;
        let pos = init.uniform("decoder.pos", d, vec![cfg.max_target_len, d])?;
        let layers = (0..cfg.n_dec_layers)
            .map(|i| DecoderLayer::new(&mut init, &format!("decoder.layers.{i}"), d, cfg.heads))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let final_norm = LayerNorm::new(&mut init, "decoder.final_norm", d)?;
        let out = Linear::new(&mut init, "decoder.out", d, cfg.out_vocab)?;
        Decoder {
            embed,
            pos,
            layers,
            final_norm,
            out,
        }
    };
    Ok(ModelBundle {
        kind,
        config: cfg.clone(),
        params,
        encoder,
        decoder,
        out_vocab: None,
        in_vocab: None,
    })
}

/// Gathers rows of a token table, scaled by `scale`, plus positions for a
/// padded batch. The text encoder scales by sqrt(d_model).
fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    table: ParamId,
    pos: ParamId,
    seqs: &[&[usize]],
    time: usize,
    scale: f64,
) -> std::result::Result<Var, TensorError> {
    let mut ids = Vec::with_capacity(seqs.len() * time);
    let mut positions = Vec::with_capacity(seqs.len() * time);
    for s in seqs {
        ids.extend(s.iter().copied().chain(std::iter::repeat(PAD)).take(time));
        positions.extend(0..time);
    }
    let t = g.param(store, table);
    let p = g.param(store, pos);
    let mut e = g.embedding(t, &ids)?;
    if scale != 1.0 {
        e = g.scale(e, T::from_f64_lossy(scale))?;
    }
    let pe = g.embedding(p, &positions)?;
    g.add(e, pe)
}

impl ModelBundle {
    pub fn counts(&self) -> ParamCounts {
        self.config.param_counts(self.kind)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn has_adapters(&self) -> bool {
        self.params.iter().any(|(_, p)| is_adapter(&p.name))
    }

    /// Runs the encoder; returns states `[batch * T', D]` and their layout.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        src: Source<'_>,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Var, Batch)> {
        match (&self.encoder, src) {
            (Encoder::Conformer { subsample, layers }, Source::Features(feats)) => {
                let (mut x, layout) = subsample.forward(g, store, feats)?;
                for layer in layers {
                    x = layer.forward(g, store, x, &layout, ctx)?;
                }
                Ok((x, layout))
            }
            (
                Encoder::Text {
                    embed,
                    pos,
                    layers,
                    final_norm,
                },
                Source::Tokens(seqs),
            ) => {
                if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
                    return Err(ModelError::Config("empty source sequence".into()));
                }
                let time = seqs.iter().map(|s| s.len()).max().unwrap();
                if time > self.config.max_source_len {
                    return Err(ModelError::Config(format!(
                        "source length {time} exceeds max_source_len {}",
                        self.config.max_source_len
                    )));
                }
                let layout = Batch::new(time, seqs.iter().map(|s| s.len()).collect())?;
                let mut x = embed_tokens(g, store, *embed, *pos, seqs, time, (self.config.d_model as f64).sqrt())?;
                for layer in layers {
                    x = layer.forward(g, store, x, &layout, ctx)?;
                }
                Ok((final_norm.forward(g, store, x)?, layout))
            }
            _ => Err(ModelError::Config(format!("{:?} model given the wrong source type", self.kind))),
        }
    }

    /// Logits `[batch * L, V]` for BOS-started prefixes padded to a common
    /// length `L`; row `i` depends only on `prefix[..=i]` and the encoder.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefixes: &[&[usize]],
        enc: Var,
        enc_layout: &Batch,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        if prefixes.is_empty() || prefixes.iter().any(|p| p.is_empty()) {
            return Err(ModelError::Config("empty decoder prefix".into()));
        }
        if let Some(p) = prefixes.iter().find(|p| p[0] != crate::tokenizer::BOS) {
            return Err(ModelError::Config(format!("prefix must start with BOS, got {:?}", &p[..1])));
        }
        let time = prefixes.iter().map(|p| p.len()).max().unwrap();
        if time > self.config.max_target_len {
            return Err(ModelError::Config(format!(
                "prefix length {time} exceeds max_target_len {}",
                self.config.max_target_len
            )));
        }
        if let Some(&bad) = prefixes.iter().flat_map(|p| p.iter()).find(|&&t| t >= self.config.out_vocab) {
            return Err(ModelError::Config(format!("token {bad} outside vocab {}", self.config.out_vocab)));
        }
        let layout = Batch::new(time, prefixes.iter().map(|p| p.len()).collect())?;
        let dec = &self.decoder;
        let mut y = embed_tokens(g, store, dec.embed, dec.pos, prefixes, time, 1.0)?;
        for layer in &dec.layers {
            y = layer.forward(g, store, y, &layout, enc, enc_layout, ctx)?;
        }
        let y = dec.final_norm.forward(g, store, y)?;
        Ok(dec.out.forward(g, store, y)?)
    }

    /// Inference-only logits for a single input and prefix.
    pub fn logits_single(&self, src: Source<'_>, prefix: &[usize]) -> Result<Vec<f32>> {
        let mut g = Graph::no_grad();
        let (enc, layout) = self.encode(&mut g, &self.params, src, &mut Ctx::eval())?;
        let out = self.decode_logits(&mut g, &self.params, &[prefix], enc, &layout, &mut Ctx::eval())?;
        Ok(g.value(out).data().to_vec())
    }

    /// Marks every encoder parameter frozen; adapters stay trainable iff
    /// requested. The decoder is always trainable.
    pub fn freeze_encoder(&mut self, adapters_trainable: bool) -> Result<()> {
        if adapters_trainable && !self.has_adapters() {
            return Err(ModelError::Config("adapters requested but the model has none".into()));
        }
        self.params.set_trainable_where(|n| n.starts_with("encoder."), false);
        if adapters_trainable {
            self.params.set_trainable_where(is_adapter, true);
        }
        self.params.set_trainable_where(|n| n.starts_with("decoder."), true);
        Ok(())
    }

    /// Copies every `encoder.*` tensor except adapters from `other`.
    pub fn load_encoder_from(&mut self, other: &ModelBundle) -> Result<()> {
        let mut copied = 0;
        for (_, p) in self.params.iter_mut() {
            if !p.name.starts_with("encoder.") || is_adapter(&p.name) {
                continue;
            }
            let src = other.params.by_name(&p.name).ok_or_else(|| {
                ModelError::Config(format!("source checkpoint has no tensor {}", p.name))
            })?;
            if src.value.shape() != p.value.shape() {
                return Err(ModelError::Config(format!(
                    "encoder tensor {} has shape {:?} in the source, {:?} here",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            copied += 1;
        }
        if copied == 0 {
            return Err(ModelError::Config("no encoder tensors to copy".into()));
        }
        Ok(())
    }

    /// Byte digest of all encoder tensors (adapters excluded).
    pub fn encoder_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("encoder.") && !is_adapter(&p.name))
            .flat_map(|(_, p)| p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Checkpoint layout: magic, u32 version, u32 header length, JSON header
    /// (kind, config, vocab files), u32 tensor count, then per tensor:
    /// u32 name length, name, u8 dtype (0 = f32), u8 trainable, u32 rank,
    /// u32 dims, little-endian row-major payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            kind: self.kind,
            config: self.config.clone(),
            out_vocab: self.out_vocab.as_ref().map(Vocab::to_text),
            in_vocab: self.in_vocab.as_ref().map(Vocab::to_text),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.params.num_elements());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(0);
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |msg: String| ModelError::Checkpoint {
            path: path.to_string(),
            msg,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).ok_or_else(|| err("truncated magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = r.u32().ok_or_else(|| err("truncated version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = r.u32().ok_or_else(|| err("truncated header".into()))? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen).ok_or_else(|| err("truncated header".into()))?)
            .map_err(|e| err(format!("bad header: {e}")))?;
        let mut model = build(&header.config, header.kind, 0)?;
        model.out_vocab = header.out_vocab.as_deref().map(Vocab::from_text).transpose()?;
        model.in_vocab = header.in_vocab.as_deref().map(Vocab::from_text).transpose()?;
        let count = r.u32().ok_or_else(|| err("truncated tensor count".into()))? as usize;
        if count != model.params.len() {
            return Err(err(format!("{count} tensors, config implies {}", model.params.len())));
        }
        for _ in 0..count {
            let trunc = || err("truncated tensor record".into());
            let nlen = r.u32().ok_or_else(trunc)? as usize;
            let name = String::from_utf8(r.take(nlen).ok_or_else(trunc)?.to_vec()).map_err(|_| err("tensor name is not UTF-8".into()))?;
            let dtype = r.u8().ok_or_else(trunc)?;
            if dtype != 0 {
                return Err(err(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let trainable = r.u8().ok_or_else(trunc)? != 0;
            let rank = r.u32().ok_or_else(trunc)? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(trunc)?;
            let id = model.params.id(&name).ok_or_else(|| err(format!("unexpected tensor {name}")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(err(format!(
                    "tensor {name}: shape {shape:?}, config implies {:?}",
                    p.value.shape()
                )));
            }
            let n = p.value.numel();
            let payload = r.take(4 * n).ok_or_else(trunc)?;
            for (dst, c) in p.value.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
                *dst = f32::from_le_bytes(c.try_into().unwrap());
            }
            p.trainable = trainable;
        }
        if r.pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    kind: ModelKind,
    config: ModelConfig,
    out_vocab: Option<String>,
    in_vocab: Option<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_are_enumerated() {
        let cfg = ModelConfig {
            heads: 5,
            conv_kernel: 8,
            ..ModelConfig::default()
        };
        let msg = cfg.validate(ModelKind::Speech).unwrap_err().to_string();
        assert!(msg.contains("heads") && msg.contains("conv_kernel"), "{msg}");
    }

    #[test]
    fn store_matches_closed_form_counts() {
        let mut cfg = ModelConfig::default();
        cfg.adapter.enabled = true;
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.num_params(), m.counts().total());
        let nlu = build_nlu_model(&ModelConfig::nlu(40, 30), 0).unwrap();
        assert_eq!(nlu.num_params(), nlu.counts().total());
    }

    #[test]
    fn freeze_without_adapters_errors_when_requested() {
        let mut m = build_model(&ModelConfig::default(), 0).unwrap();
        assert!(m.freeze_encoder(true).is_err());
        m.freeze_encoder(false).unwrap();
        assert_eq!(m.num_trainable(), m.counts().decoder);
    }
}
