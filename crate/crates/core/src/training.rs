//! Teacher-forced NLL objective, grouped Adam with global-norm clipping,
//! warmup + cosine learning-rate schedule, and the epoch loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureMatrix;
use crate::model::{ModelBundle, ModelError, Source};
use crate::nnet::Ctx;
use crate::tensorcore::{Graph, ParamId, ParamStore, Scalar, TensorError, Var};
use crate::tokenizer::{BOS, EOS, PAD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("example {index}: {msg}")]
    Example { index: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean NLL and the number of target tokens it averages over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingLoss {
    pub value: f64,
    pub tokens: usize,
}

/// Decoder inputs, shifted targets and mask for a batch of BOS…EOS sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForcing {
    pub inputs: Vec<Vec<usize>>,
    /// `[batch * time]`, PAD where masked.
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub time: usize,
}

/// Splits `[y1 .. yL]` into inputs `y1..y(L-1)` and targets `y2..yL`,
/// padded to the longest sequence. PAD targets are masked out.
pub fn teacher_forcing(seqs: &[&[usize]]) -> Result<TeacherForcing> {
    let mut inputs = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < 2 || s[0] != BOS {
            return Err(TrainError::Example {
                index: i,
                msg: "target must be BOS-prefixed with at least one more token".into(),
            });
        }
        inputs.push(s[..s.len() - 1].to_vec());
    }
    let time = inputs.iter().map(Vec::len).max().unwrap_or(0);
    let mut targets = Vec::with_capacity(seqs.len() * time);
    let mut mask = Vec::with_capacity(seqs.len() * time);
    for s in seqs {
        for t in 0..time {
            let y = s.get(t + 1).copied().unwrap_or(PAD);
            targets.push(y);
            mask.push(y != PAD);
        }
    }
    Ok(TeacherForcing {
        inputs,
        targets,
        mask,
        time,
    })
}

/// Mean over unmasked rows of `-log softmax(logits[i])[targets[i]]`.
pub fn nll_teacher_forcing_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, tf: &TeacherForcing) -> Result<Var> {
    Ok(g.cross_entropy(logits, &tf.targets, &tf.mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    /// Decoder and adapters.
    Decoder,
}

pub fn group_of(name: &str) -> Group {
    if name.starts_with("encoder.") && !name.contains(".adapter_") {
        Group::Encoder
    } else {
        Group::Decoder
    }
}

/// Global L2 norm over the gradients of trainable parameters.
pub fn global_norm(params: &ParamStore<f32>, grads: &[(ParamId, Vec<f32>)]) -> f64 {
    grads
        .iter()
        .filter(|(id, _)| params.get(*id).trainable)
        .flat_map(|(_, g)| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update. Frozen parameters are skipped entirely,
/// moments included. Returns the pre-clip gradient norm.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[(ParamId, Vec<f32>)],
    state: &mut OptimState,
    cfg: &AdamConfig,
    lr: impl Fn(Group) -> f64,
) -> Result<f64> {
    for (id, g) in grads {
        if params.get(*id).trainable && g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGrad(params.get(*id).name.clone()));
        }
    }
    let norm = global_norm(params, grads);
    let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let p = params.get_mut(*id);
        if !p.trainable {
            continue;
        }
        let lr = lr(group_of(&p.name));
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64 * scale + cfg.weight_decay * *w as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl ScheduleConfig {
    /// Warmup of 2000 steps, shortened to 200 for runs under 2000 steps.
    pub fn default_warmup(total_steps: usize) -> usize {
        if total_steps < 2000 {
            200.min(total_steps.saturating_sub(1))
        } else {
            2000
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_enc > 0.0 && self.lr_dec > 0.0) || self.min_lr < 0.0 {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// `(encoder lr, decoder lr)` at `step`.
pub fn lr_at(step: usize, sc: &ScheduleConfig) -> (f64, f64) {
    let f = |peak: f64| {
        if step < sc.warmup_steps {
            return peak * step as f64 / sc.warmup_steps as f64;
        }
        if step >= sc.total_steps {
            return sc.min_lr.min(peak);
        }
        let progress = (step - sc.warmup_steps) as f64 / (sc.total_steps - sc.warmup_steps) as f64;
        let min_ratio = (sc.min_lr / peak).min(1.0);
        peak * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    };
    (f(sc.lr_enc), f(sc.lr_dec))
}

/// Encoder input of one training example.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceData {
    Features(FeatureMatrix),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: SourceData,
    /// BOS … EOS
    pub target: Vec<usize>,
}

/// Runs `f` with a [`Source`] borrowing the sources of `batch`.
pub fn with_source<R>(batch: &[&SourceData], f: impl FnOnce(Source<'_>) -> R) -> R {
    match batch.first() {
        Some(SourceData::Tokens(_)) => {
            let toks: Vec<&[usize]> = batch
                .iter()
                .map(|s| match s {
                    SourceData::Tokens(t) => t.as_slice(),
                    SourceData::Features(_) => &[],
                })
                .collect();
            f(Source::Tokens(&toks))
        }
        _ => {
            let feats: Vec<&FeatureMatrix> = batch
                .iter()
                .filter_map(|s| match s {
                    SourceData::Features(m) => Some(m),
                    SourceData::Tokens(_) => None,
                })
                .collect();
            f(Source::Features(&feats))
        }
    }
}

/// Builds the graph for one batch and returns it with the loss node.
pub fn batch_loss<T: Scalar>(
    model: &ModelBundle,
    store: &ParamStore<T>,
    batch: &[&Example],
    ctx: &mut Ctx<'_>,
) -> Result<(Graph<T>, Var, usize)> {
    let mut g = Graph::new();
    let targets: Vec<&[usize]> = batch.iter().map(|e| e.target.as_slice()).collect();
    let tf = teacher_forcing(&targets)?;
    let sources: Vec<&SourceData> = batch.iter().map(|e| &e.source).collect();
    let (enc, layout) = with_source(&sources, |src| model.encode(&mut g, store, src, ctx))?;
    let inputs: Vec<&[usize]> = tf.inputs.iter().map(Vec::as_slice).collect();
    let logits = model.decode_logits(&mut g, store, &inputs, enc, &layout, ctx)?;
    let loss = nll_teacher_forcing_loss(&mut g, logits, &tf)?;
    let tokens = tf.mask.iter().filter(|&&m| m).count();
    Ok((g, loss, tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_enc: f64,
    pub lr_dec: f64,
    /// `None` applies [`ScheduleConfig::default_warmup`].
    pub warmup_steps: Option<usize>,
    pub min_lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr_enc: 2e-4,
            lr_dec: 3e-4,
            warmup_steps: None,
            min_lr: 0.0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Laptop-scale settings for the synthetic task: 2:3 encoder/decoder
    /// learning rates, raised for the short schedule.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr_enc: 1.2e-3,
            lr_dec: 1.8e-3,
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, n: usize) -> ScheduleConfig {
        let total_steps = (self.epochs * self.steps_per_epoch(n)).max(1);
        ScheduleConfig {
            lr_enc: self.lr_enc,
            lr_dec: self.lr_dec,
            warmup_steps: self.warmup_steps.unwrap_or_else(|| ScheduleConfig::default_warmup(total_steps)),
            total_steps,
            min_lr: self.min_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub train_loss: f64,
    pub dev: Option<DevScores>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevScores {
    pub intent_accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Mean loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let with_dev = self.epochs.iter().any(|e| e.dev.is_some());
        let mut out = String::from("epoch,step,lr_enc,lr_dec,train_loss");
        if with_dev {
            out.push_str(",dev_intent_acc,dev_f1");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{},{:.6e},{:.6e},{:.6}", e.epoch, e.step, e.lr_enc, e.lr_dec, e.train_loss);
            if with_dev {
                match e.dev {
                    Some(d) => {
                        let _ = write!(out, ",{:.4},{:.4}", d.intent_accuracy, d.f1);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// First epoch whose dev scores reach both thresholds.
    pub fn first_epoch_reaching(&self, acc: f64, f1: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.dev.is_some_and(|d| d.intent_accuracy >= acc && d.f1 >= f1))
            .map(|e| e.epoch)
    }
}

/// Returned by the per-epoch callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Trains `model` in place. After every epoch `on_epoch` may score the model
/// (its result is logged) and decide whether to continue.
pub fn train<F>(model: &mut ModelBundle, data: &[Example], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainLog>
where
    F: FnMut(&ModelBundle, usize) -> (Option<DevScores>, Control),
{
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainError::Config("epochs and batch_size must be positive".into()));
    }
    for (i, e) in data.iter().enumerate() {
        let ok = match (&e.source, model.kind) {
            (SourceData::Features(_), crate::model::ModelKind::Speech) => true,
            (SourceData::Tokens(_), crate::model::ModelKind::Text) => true,
            _ => false,
        };
        if !ok {
            return Err(TrainError::Example {
                index: i,
                msg: format!("source type does not match the {:?} model", model.kind),
            });
        }
        if e.target.len() > model.config.max_target_len + 1 || e.target.last() != Some(&EOS) {
            return Err(TrainError::Example {
                index: i,
                msg: format!("target must end in EOS and fit max_target_len {}", model.config.max_target_len),
            });
        }
        if let Some(&t) = e.target.iter().find(|&&t| t >= model.config.out_vocab) {
            return Err(TrainError::Example {
                index: i,
                msg: format!("token {t} outside the model vocabulary {}", model.config.out_vocab),
            });
        }
    }
    let sc = cfg.schedule(data.len());
    sc.validate()?;
    let mut state = OptimState::new(&model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd80f_0f1d);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut token_sum) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mut ctx = Ctx::train(model.config.dropout, &mut dropout_rng);
            let (mut g, loss, tokens) = match batch_loss(model, &model.params, &batch, &mut ctx) {
                Err(TrainError::Tensor(TensorError::NonFinite(_)))
                | Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite(_)))) => {
                    return Err(TrainError::Diverged { step, loss: f64::NAN });
                }
                r => r?,
            };
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { step, loss: value });
            }
            g.backward(loss)?;
            let grads = g.param_grads();
            let (lr_enc, lr_dec) = lr_at(step, &sc);
            adam_step(&mut model.params, &grads, &mut state, &cfg.adam, |grp| match grp {
                Group::Encoder => lr_enc,
                Group::Decoder => lr_dec,
            })?;
            step += 1;
            loss_sum += value * tokens as f64;
            token_sum += tokens;
            log.step_losses.push(value);
        }
        let (lr_enc, lr_dec) = lr_at(step, &sc);
        let (dev, control) = on_epoch(model, epoch);
        log.epochs.push(EpochLog {
            epoch,
            step,
            lr_enc,
            lr_dec,
            train_loss: loss_sum / token_sum as f64,
            dev,
        });
        if control == Control::Stop {
            break;
        }
    }
    Ok(log)
}
