//! Layers built on the autodiff tape: linear/MLP blocks, multi-head
//! attention with relative-position bias, the Conformer convolution module,
//! bottleneck adapters, Conformer and Transformer layers, and the frame
//! subsampler.
//!
//! Every layer stores [`ParamId`] handles into a [`ParamStore`]; forward
//! functions take the store and a [`Graph`] and are otherwise pure. Batched
//! sequences are laid out as `[batch * time, D]` rows described by a
//! [`Batch`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureMatrix;
use crate::tensorcore::{AttentionSpec, Graph, ParamId, ParamStore, Result, Scalar, Tensor, TensorError, Var};

/// Clip distance of the relative-position bias tables.
pub const REL_CLIP: usize = 64;

/// Row layout of a padded batch of sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub time: usize,
    pub lens: Vec<usize>,
}

impl Batch {
    pub fn new(time: usize, lens: Vec<usize>) -> Result<Self> {
        if let Some(&l) = lens.iter().find(|&&l| l > time) {
            return Err(TensorError::Invalid {
                op: "batch",
                msg: format!("valid length {l} exceeds {time} frames"),
            });
        }
        Ok(Self {
            batch: lens.len(),
            time,
            lens,
        })
    }

    pub fn single(time: usize) -> Self {
        Self {
            batch: 1,
            time,
            lens: vec![time],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.time
    }
}

/// Dropout configuration for one forward pass. `rng == None` disables it.
pub struct Ctx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
        }
    }

    fn active(&self) -> bool {
        self.dropout > 0.0 && self.rng.is_some()
    }
}

/// Inverted dropout via a constant mask.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
    if !ctx.active() || !g.grad_enabled() {
        return Ok(x);
    }
    let p = ctx.dropout;
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let rng = ctx.rng.as_deref_mut().expect("active dropout has an rng");
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    g.mul_const(x, mask)
}

/// Seeded parameter initializer that registers tensors under a name prefix.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        self.store.add(name, Tensor::from_f64(shape, &values)?)
    }

    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, name: &str, fan_in: usize, shape: Vec<usize>) -> Result<ParamId> {
        let a = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-a..a)).collect();
        self.add(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// `[in, out]`
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: init.uniform(&format!("{name}.weight"), d_in, vec![d_in, d_out])?,
            b: init.constant(&format!("{name}.bias"), vec![d_out], 0.0)?,
        })
    }

    pub fn zeros<T: Scalar>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: init.constant(&format!("{name}.weight"), vec![d_in, d_out], 0.0)?,
            b: init.constant(&format!("{name}.bias"), vec![d_out], 0.0)?,
        })
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), vec![d], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), vec![d], 0.0)?,
        })
    }

    pub fn num_params(d: usize) -> usize {
        2 * d
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Swish => g.swish(x),
        }
    }
}

/// Pre-norm `D → 4D → D` MLP branch (residual added by the caller).
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub const EXPANSION: usize = 4;

    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), d)?,
            fc1: Linear::new(init, &format!("{name}.fc1"), d, Self::EXPANSION * d)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), Self::EXPANSION * d, d)?,
            act,
        })
    }

    pub fn num_params(d: usize) -> usize {
        LayerNorm::num_params(d) + Linear::num_params(d, Self::EXPANSION * d) + Linear::num_params(Self::EXPANSION * d, d)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = self.act.apply(g, h)?;
        let h = self.fc2.forward(g, store, h)?;
        dropout(g, h, ctx)
    }
}

/// Q/K/V/O projections plus an optional per-head relative-position bias.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// `[heads, 2·REL_CLIP + 1]`
    pub rel_bias: Option<ParamId>,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize, rel_bias: bool) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{heads} heads do not divide model dim {d}"),
            });
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), d, d)?,
            k: Linear::new(init, &format!("{name}.k"), d, d)?,
            v: Linear::new(init, &format!("{name}.v"), d, d)?,
            o: Linear::new(init, &format!("{name}.o"), d, d)?,
            rel_bias: if rel_bias {
                Some(init.constant(&format!("{name}.rel_bias"), vec![heads, 2 * REL_CLIP + 1], 0.0)?)
            } else {
                None
            },
            heads,
        })
    }

    pub fn num_params(d: usize, heads: usize, rel_bias: bool) -> usize {
        4 * Linear::num_params(d, d) + if rel_bias { heads * (2 * REL_CLIP + 1) } else { 0 }
    }

    /// Attends queries from `xq` over keys/values from `xkv`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xkv: Var,
        spec: AttentionSpec,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let bias = self.rel_bias.map(|b| g.param(store, b));
        let spec = AttentionSpec {
            rel_clip: REL_CLIP,
            ..spec
        };
        let a = g.attention(q, k, v, bias, spec)?;
        let a = dropout(g, a, ctx)?;
        self.o.forward(g, store, a)
    }
}

/// `x + up(relu(down(x)))`; `up` starts at zero so a fresh adapter is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, bottleneck: usize) -> Result<Self> {
        if bottleneck == 0 || bottleneck * 4 > d {
            return Err(TensorError::Invalid {
                op: "adapter",
                msg: format!("bottleneck {bottleneck} must be in 1..={}", d / 4),
            });
        }
        Ok(Self {
            down: Linear::new(init, &format!("{name}.down"), d, bottleneck)?,
            up: Linear::zeros(init, &format!("{name}.up"), bottleneck, d)?,
        })
    }

    pub fn num_params(d: usize, bottleneck: usize) -> usize {
        2 * d * bottleneck + bottleneck + d
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.up.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// LN → pointwise D→2D → GLU → depthwise conv → LN → Swish → pointwise D→D.
#[derive(Debug, Clone, Copy)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    /// `[K, D]`
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub conv_norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv_module",
                msg: format!("kernel size {kernel} must be odd"),
            });
        }
        Ok(Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), d)?,
            pointwise_in: Linear::new(init, &format!("{name}.pointwise_in"), d, 2 * d)?,
            depthwise: init.uniform(&format!("{name}.depthwise.weight"), kernel, vec![kernel, d])?,
            depthwise_bias: init.constant(&format!("{name}.depthwise.bias"), vec![d], 0.0)?,
            conv_norm: LayerNorm::new(init, &format!("{name}.conv_norm"), d)?,
            pointwise_out: Linear::new(init, &format!("{name}.pointwise_out"), d, d)?,
        })
    }

    pub fn num_params(d: usize, kernel: usize) -> usize {
        2 * LayerNorm::num_params(d) + Linear::num_params(d, 2 * d) + kernel * d + d + Linear::num_params(d, d)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Batch,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.pointwise_in.forward(g, store, h)?;
        let h = g.glu(h)?;
        let k = g.param(store, self.depthwise);
        let kb = g.param(store, self.depthwise_bias);
        let h = g.depthwise_conv1d(h, k, Some(kb), layout.batch, &layout.lens)?;
        let h = self.conv_norm.forward(g, store, h)?;
        let h = g.swish(h)?;
        let h = self.pointwise_out.forward(g, store, h)?;
        dropout(g, h, ctx)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConformerLayer {
    pub ffn1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub final_norm: LayerNorm,
    pub adapter_attn: Option<Adapter>,
    pub adapter_conv: Option<Adapter>,
}

impl ConformerLayer {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        d: usize,
        heads: usize,
        kernel: usize,
        adapter_bottleneck: Option<usize>,
    ) -> Result<Self> {
        let ffn1 = FeedForward::new(init, &format!("{name}.ffn1"), d, Activation::Swish)?;
        let attn_norm = LayerNorm::new(init, &format!("{name}.attn_norm"), d)?;
        let attn = MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads, true)?;
        let conv = ConvModule::new(init, &format!("{name}.conv"), d, kernel)?;
        let ffn2 = FeedForward::new(init, &format!("{name}.ffn2"), d, Activation::Swish)?;
        let final_norm = LayerNorm::new(init, &format!("{name}.final_norm"), d)?;
        let (adapter_attn, adapter_conv) = match adapter_bottleneck {
            Some(b) => (
                Some(Adapter::new(init, &format!("{name}.adapter_attn"), d, b)?),
                Some(Adapter::new(init, &format!("{name}.adapter_conv"), d, b)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            ffn1,
            attn_norm,
            attn,
            conv,
            ffn2,
            final_norm,
            adapter_attn,
            adapter_conv,
        })
    }

    pub fn num_params(d: usize, heads: usize, kernel: usize, adapter_bottleneck: Option<usize>) -> usize {
        2 * FeedForward::num_params(d)
            + 2 * LayerNorm::num_params(d)
            + MultiHeadAttention::num_params(d, heads, true)
            + ConvModule::num_params(d, kernel)
            + adapter_bottleneck.map_or(0, |b| 2 * Adapter::num_params(d, b))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Batch,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        if x_rows(g, x) != layout.rows() {
            return Err(TensorError::Invalid {
                op: "conformer_layer",
                msg: format!("{} rows for layout {}×{}", x_rows(g, x), layout.batch, layout.time),
            });
        }
        let half = T::from_f64_lossy(0.5);
        let h = self.ffn1.forward(g, store, x, ctx)?;
        let h = g.scale(h, half)?;
        let x = g.add(x, h)?;

        let h = self.attn_norm.forward(g, store, x)?;
        let spec = AttentionSpec::full(self.attn.heads, layout.batch, layout.time, layout.time, layout.lens.clone());
        let mut h = self.attn.forward(g, store, h, h, spec, ctx)?;
        if let Some(a) = &self.adapter_attn {
            h = a.forward(g, store, h)?;
        }
        let x = g.add(x, h)?;

        let mut h = self.conv.forward(g, store, x, layout, ctx)?;
        if let Some(a) = &self.adapter_conv {
            h = a.forward(g, store, h)?;
        }
        let x = g.add(x, h)?;

        let h = self.ffn2.forward(g, store, x, ctx)?;
        let h = g.scale(h, half)?;
        let x = g.add(x, h)?;
        self.final_norm.forward(g, store, x)
    }
}

fn x_rows<T: Scalar>(g: &Graph<T>, x: Var) -> usize {
    g.shape(x).first().copied().unwrap_or(0)
}

/// Pre-norm Transformer encoder layer (self-attention + ReLU MLP).
#[derive(Debug, Clone, Copy)]
pub struct TransformerEncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl TransformerEncoderLayer {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(init, &format!("{name}.attn_norm"), d)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads, false)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, Activation::Relu)?,
        })
    }

    pub fn num_params(d: usize, heads: usize) -> usize {
        LayerNorm::num_params(d) + MultiHeadAttention::num_params(d, heads, false) + FeedForward::num_params(d)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Batch,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let h = self.attn_norm.forward(g, store, x)?;
        let spec = AttentionSpec::full(self.attn.heads, layout.batch, layout.time, layout.time, layout.lens.clone());
        let h = self.attn.forward(g, store, h, h, spec, ctx)?;
        let x = g.add(x, h)?;
        let h = self.ffn.forward(g, store, x, ctx)?;
        g.add(x, h)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention, MLP.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_norm: LayerNorm::new(init, &format!("{name}.self_norm"), d)?,
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, heads, false)?,
            cross_norm: LayerNorm::new(init, &format!("{name}.cross_norm"), d)?,
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross_attn"), d, heads, false)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, Activation::Relu)?,
        })
    }

    pub fn num_params(d: usize, heads: usize) -> usize {
        2 * LayerNorm::num_params(d) + 2 * MultiHeadAttention::num_params(d, heads, false) + FeedForward::num_params(d)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y: Var,
        y_layout: &Batch,
        enc: Var,
        enc_layout: &Batch,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        if y_layout.batch != enc_layout.batch {
            return Err(TensorError::Invalid {
                op: "decoder_layer",
                msg: format!("target batch {} vs encoder batch {}", y_layout.batch, enc_layout.batch),
            });
        }
        let h = self.self_norm.forward(g, store, y)?;
        let spec = AttentionSpec::causal(self.self_attn.heads, y_layout.batch, y_layout.time, vec![y_layout.time; y_layout.batch]);
        let h = self.self_attn.forward(g, store, h, h, spec, ctx)?;
        let y = g.add(y, h)?;

        let h = self.cross_norm.forward(g, store, y)?;
        let spec = AttentionSpec::full(
            self.cross_attn.heads,
            y_layout.batch,
            y_layout.time,
            enc_layout.time,
            enc_layout.lens.clone(),
        );
        let h = self.cross_attn.forward(g, store, h, enc, spec, ctx)?;
        let y = g.add(y, h)?;

        let h = self.ffn.forward(g, store, y, ctx)?;
        g.add(y, h)
    }
}

/// Stacks `factor` consecutive frames and projects them to the model dim.
#[derive(Debug, Clone, Copy)]
pub struct Subsample {
    pub proj: Linear,
    pub factor: usize,
    pub feat_dim: usize,
}

impl Subsample {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, feat_dim: usize, d: usize, factor: usize) -> Result<Self> {
        if ![1, 2, 4].contains(&factor) {
            return Err(TensorError::Invalid {
                op: "subsample",
                msg: format!("factor {factor} not in {{1, 2, 4}}"),
            });
        }
        Ok(Self {
            proj: Linear::new(init, &format!("{name}.proj"), factor * feat_dim, d)?,
            factor,
            feat_dim,
        })
    }

    pub fn num_params(feat_dim: usize, d: usize, factor: usize) -> usize {
        Linear::num_params(factor * feat_dim, d)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: &[&FeatureMatrix],
    ) -> Result<(Var, Batch)> {
        let (packed, layout) = pack_frames::<T>(feats, self.factor, self.feat_dim)?;
        let x = g.constant(packed);
        Ok((self.proj.forward(g, store, x)?, layout))
    }
}

/// Pads a batch to a common length that is a multiple of `factor`, zeroes
/// frames past each valid length, and regroups every `factor` frames into
/// one row: `[batch * T/factor, factor * D]`.
pub fn pack_frames<T: Scalar>(feats: &[&FeatureMatrix], factor: usize, dim: usize) -> Result<(Tensor<T>, Batch)> {
    let empty = || TensorError::Invalid {
        op: "subsample",
        msg: "empty input".into(),
    };
    if feats.is_empty() || factor == 0 {
        return Err(empty());
    }
    if let Some(f) = feats.iter().find(|f| f.dim() != dim) {
        return Err(TensorError::ShapeMismatch {
            op: "subsample",
            lhs: vec![f.num_frames(), f.dim()],
            rhs: vec![dim],
        });
    }
    if feats.iter().any(|f| f.valid_len() == 0) {
        return Err(empty());
    }
    let max_valid = feats.iter().map(|f| f.valid_len()).max().unwrap();
    let out_time = max_valid.div_ceil(factor);
    let row = factor * dim;
    let mut data = vec![T::zero(); feats.len() * out_time * row];
    let mut lens = Vec::with_capacity(feats.len());
    for (b, f) in feats.iter().enumerate() {
        let valid = f.valid_len();
        let dst = &mut data[b * out_time * row..];
        for (v, x) in dst[..valid * dim].iter_mut().zip(&f.frames()[..valid * dim]) {
            *v = T::from_f32(*x).expect("f32 converts");
        }
        lens.push(valid.div_ceil(factor));
    }
    Ok((Tensor::new(vec![feats.len() * out_time, row], data)?, Batch::new(out_time, lens)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn init_store(seed: u64) -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn feed_forward_count_matches_store() {
        let (mut store, mut rng) = init_store(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        FeedForward::new(&mut init, "f", 8, Activation::Relu).unwrap();
        assert_eq!(store.num_elements(), FeedForward::num_params(8));
    }

    #[test]
    fn adapter_bottleneck_limit() {
        let (mut store, mut rng) = init_store(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        assert!(Adapter::new(&mut init, "a", 16, 5).is_err());
        assert!(Adapter::new(&mut init, "b", 16, 4).is_ok());
        assert!(Adapter::new(&mut init, "c", 16, 0).is_err());
    }

    #[test]
    fn pack_frames_ceil_lengths() {
        let f7 = FeatureMatrix::dense((0..14).map(|v| v as f32).collect(), 2).unwrap();
        let f8 = FeatureMatrix::new(vec![1.0; 16], 8, 2, 5).unwrap();
        let (t, layout) = pack_frames::<f64>(&[&f7, &f8], 4, 2).unwrap();
        assert_eq!(layout.time, 2);
        assert_eq!(layout.lens, vec![2, 2]);
        assert_eq!(t.shape(), &[4, 8]);
        // frames past the valid length are zeroed
        assert_eq!(&t.data()[16 + 8 + 2..16 + 16], &[0.0; 6]);
        assert_eq!(t.data()[13], 13.0);
        assert_eq!(t.data()[14], 0.0);
    }

    #[test]
    fn subsample_factor_validated() {
        let (mut store, mut rng) = init_store(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        assert!(Subsample::new(&mut init, "s", 4, 8, 3).is_err());
    }
}
