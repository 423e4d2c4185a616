//! Slice-level forward kernels shared by the tape and the cached inference path.

use super::{Scalar, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Normalizes each `d`-wide row of `x` and applies the affine `gamma`/`beta`.
/// Writes per-row mean and reciprocal std when buffers are supplied.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
    out: &mut [T],
    mut stats: Option<(&mut [T], &mut [T])>,
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, (row, orow)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            orow[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        if let Some((m, s)) = stats.as_mut() {
            m[r] = mean;
            s[r] = rstd;
        }
    }
}

/// Numerically stable in-place softmax over one row. Entries equal to
/// `-inf` are treated as masked and receive probability 0. Returns `false`
/// if every entry is masked.
pub fn softmax_row<T: Scalar>(row: &mut [T]) -> bool {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    true
}

/// `log_softmax(row / temperature)` in a fresh buffer.
pub fn log_softmax_tempered(row: &[f32], temperature: f32) -> Vec<f32> {
    let scaled: Vec<f32> = row.iter().map(|&v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + scaled.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
    scaled.iter().map(|&v| v - lse).collect()
}

/// Layout and masking of a batched multi-head attention call.
///
/// Queries are `[batch * q_len, d]`, keys/values `[batch * k_len, d]`.
/// Key `j` of batch item `b` is visible iff `j < key_lens[b]` and, for causal
/// attention, `j <= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub causal: bool,
    pub key_lens: Vec<usize>,
    /// Relative distances are clipped to `±rel_clip` when a bias table is used.
    pub rel_clip: usize,
}

impl AttentionSpec {
    pub fn full(heads: usize, batch: usize, q_len: usize, k_len: usize, key_lens: Vec<usize>) -> Self {
        Self {
            heads,
            batch,
            q_len,
            k_len,
            causal: false,
            key_lens,
            rel_clip: 64,
        }
    }

    pub fn causal(heads: usize, batch: usize, len: usize, key_lens: Vec<usize>) -> Self {
        Self {
            causal: true,
            ..Self::full(heads, batch, len, len, key_lens)
        }
    }

    pub fn rel_index(&self, i: usize, j: usize) -> usize {
        let c = self.rel_clip as isize;
        let rel = (j as isize - i as isize).clamp(-c, c);
        (rel + c) as usize
    }

    pub fn bias_width(&self) -> usize {
        2 * self.rel_clip + 1
    }

    #[inline]
    pub fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.key_lens[b] && (!self.causal || j <= i)
    }

    pub fn validate(&self, d: usize, q_rows: usize, k_rows: usize) -> Result<(), TensorError> {
        let bad = |msg: String| TensorError::Invalid {
            op: "attention",
            msg,
        };
        if self.heads == 0 || d % self.heads != 0 {
            return Err(bad(format!("{} heads do not divide model dim {d}", self.heads)));
        }
        if q_rows != self.batch * self.q_len || k_rows != self.batch * self.k_len {
            return Err(bad(format!(
                "rows q={q_rows} k={k_rows} disagree with batch {} × ({}, {})",
                self.batch, self.q_len, self.k_len
            )));
        }
        if self.key_lens.len() != self.batch {
            return Err(bad(format!(
                "{} key lengths for batch of {}",
                self.key_lens.len(),
                self.batch
            )));
        }
        if let Some(&l) = self.key_lens.iter().find(|&&l| l > self.k_len) {
            return Err(bad(format!("key length {l} exceeds key rows {}", self.k_len)));
        }
        Ok(())
    }
}

/// Scaled dot-product attention, all heads. `probs` receives
/// `[batch, heads, q_len, k_len]` attention weights (zeros where masked).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    spec: &AttentionSpec,
    d: usize,
    out: &mut [T],
    probs: &mut [T],
) -> Result<(), TensorError> {
    let h = spec.heads;
    let dh = d / h;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (lq, lk) = (spec.q_len, spec.k_len);
    let bw = spec.bias_width();
    out.fill(T::zero());
    for b in 0..spec.batch {
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..lq {
                let qrow = &q[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                let p = &mut probs[((b * h + head) * lq + i) * lk..((b * h + head) * lq + i + 1) * lk];
                for j in 0..lk {
                    p[j] = if spec.visible(b, i, j) {
                        let krow = &k[(b * lk + j) * d + c0..(b * lk + j) * d + c0 + dh];
                        let mut s = dot(qrow, krow) * scale;
                        if let Some(bias) = bias {
                            s = s + bias[head * bw + spec.rel_index(i, j)];
                        }
                        s
                    } else {
                        T::neg_infinity()
                    };
                }
                if !softmax_row(p) {
                    if (0..lk).any(|j| spec.visible(b, i, j)) {
                        return Err(TensorError::NonFinite("attention scores".into()));
                    }
                    return Err(TensorError::NoVisibleKey { batch: b, query: i });
                }
                let orow = &mut out[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                for j in 0..lk {
                    let pj = p[j];
                    if pj != T::zero() {
                        let vrow = &v[(b * lk + j) * d + c0..(b * lk + j) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o = *o + pj * vv;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// Adds `bias` to every `bias.len()`-wide row of `x`.
pub fn add_row_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

/// Per-channel 1-D convolution with zero "same" padding. Rows at `t >=
/// lens[b]` are read as zeros.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv1d<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    batch: usize,
    time: usize,
    channels: usize,
    ksize: usize,
    lens: &[usize],
    out: &mut [T],
) {
    let half = ksize / 2;
    for b in 0..batch {
        let len = lens[b];
        for t in 0..time {
            let orow = &mut out[(b * time + t) * channels..(b * time + t + 1) * channels];
            match bias {
                Some(bias) => orow.copy_from_slice(bias),
                None => orow.fill(T::zero()),
            }
            for kk in 0..ksize {
                let src = t as isize + kk as isize - half as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let xrow = &x[(b * time + src as usize) * channels..(b * time + src as usize + 1) * channels];
                let krow = &kernel[kk * channels..(kk + 1) * channels];
                for c in 0..channels {
                    orow[c] = orow[c] + krow[c] * xrow[c];
                }
            }
        }
    }
}
