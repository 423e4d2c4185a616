use super::kernels::{self, sigmoid, AttentionSpec};
use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        batch: usize,
        time: usize,
        lens: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run tape. Nodes are appended in execution order, so the node
/// vector is already a topological order and backward walks it in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut [T] {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape that never records gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad, None)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push_raw(value, Op::Leaf, rg, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Records a parameter leaf. Gradients flow only into trainable parameters.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.trainable && self.grad_enabled;
        self.push_raw(p.value.clone(), Op::Leaf, rg, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Invalid {
                op,
                msg: format!("expected a 2-D tensor, got {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant of the same shape (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(mismatch("mul_const", self.shape(a), &[c.len()]));
        }
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst(a, c), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, s), &[a]))
    }

    /// Adds a `[D]` bias to every row of a `[.., D]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(b) != [d] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::add_row_bias(&mut data, self.value(b).data());
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, b), &[x, b]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Relu(a), &[a]))
    }

    /// `x·sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Swish(a), &[a]))
    }

    /// Gated linear unit over the trailing axis: `[.., 2C] -> [.., C]`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let d2 = self.value(a).last_dim();
        if d2 % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "glu",
                msg: format!("trailing dim {d2} is odd"),
            });
        }
        let c = d2 / 2;
        let mut data = Vec::with_capacity(self.value(a).numel() / 2);
        for row in self.value(a).data().chunks_exact(d2) {
            for j in 0..c {
                data.push(row[j] * sigmoid(row[c + j]));
            }
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = c;
        Ok(self.push(Tensor::new(shape, data)?, Op::Glu(a), &[a]))
    }

    /// Softmax along `axis`; `-inf` entries are masked to probability 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut row = vec![T::zero(); axis_len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..axis_len {
                    row[a] = src[(o * axis_len + a) * inner + i];
                }
                if !kernels::softmax_row(&mut row) {
                    return Err(TensorError::AllMasked { row: o * inner + i });
                }
                for a in 0..axis_len {
                    out[(o * axis_len + a) * inner + i] = row[a];
                }
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            &[x],
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * d];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            T::from_f64_lossy(kernels::LAYER_NORM_EPS),
            &mut out,
            Some((&mut mean, &mut rstd)),
        );
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Depthwise "same" convolution over `[batch * time, C]` with kernel
    /// `[K, C]`. Frames at or beyond `lens[b]` are treated as zeros.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        batch: usize,
        lens: &[usize],
    ) -> Result<Var> {
        let (rows, c) = self.dims2(x, "depthwise_conv1d")?;
        let (ksize, kc) = self.dims2(kernel, "depthwise_conv1d")?;
        if kc != c {
            return Err(mismatch("depthwise_conv1d", self.shape(x), self.shape(kernel)));
        }
        if ksize % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "depthwise_conv1d",
                msg: format!("kernel size {ksize} must be odd"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return Err(mismatch("depthwise_conv1d", self.shape(x), self.shape(b)));
            }
        }
        if batch == 0 || rows % batch != 0 || lens.len() != batch {
            return Err(TensorError::Invalid {
                op: "depthwise_conv1d",
                msg: format!("{rows} rows cannot split into batch {batch} with {} lengths", lens.len()),
            });
        }
        let time = rows / batch;
        if let Some(&l) = lens.iter().find(|&&l| l > time) {
            return Err(TensorError::Invalid {
                op: "depthwise_conv1d",
                msg: format!("valid length {l} exceeds {time} frames"),
            });
        }
        let mut out = vec![T::zero(); rows * c];
        kernels::depthwise_conv1d(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            batch,
            time,
            c,
            ksize,
            lens,
            &mut out,
        );
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                batch,
                time,
                lens: lens.to_vec(),
            },
            &inputs,
        ))
    }

    /// Batched multi-head scaled dot-product attention over already projected
    /// `q`, `k`, `v`. `bias`, when given, is a `[heads, 2·clip+1]` table of
    /// learned relative-position logits.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.dims2(q, "attention")?;
        let (kr, dk) = self.dims2(k, "attention")?;
        if self.shape(k) != self.shape(v) || dk != d {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        spec.validate(d, qr, kr)?;
        if let Some(b) = bias {
            if self.shape(b) != [spec.heads, spec.bias_width()] {
                return Err(mismatch("attention", &[spec.heads, spec.bias_width()], self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); qr * d];
        let mut probs = vec![T::zero(); spec.batch * spec.heads * spec.q_len * spec.k_len];
        kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.map(|b| self.value(b).data()),
            &spec,
            d,
            &mut out,
            &mut probs,
        )?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(vec![qr, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                bias,
                spec,
                probs,
            },
            &inputs,
        ))
    }

    /// Row gather from a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("id {bad} out of range for {vocab} rows"),
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Mean token-level negative log-likelihood of `targets` under
    /// `softmax(logits)`, over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{rows} logit rows vs {} targets / {} mask", targets.len(), mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: "no unmasked target".into(),
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_exact_mut(vocab).enumerate() {
            if !mask[r] {
                row.fill(T::zero());
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("target {t} out of range for vocab {vocab}"),
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Every node that requires grad and
    /// lies on a path to `loss` receives `d loss / d node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter leaf, summed per parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(pid), Some(Some(g))) = (node.param, self.grads.get(i)) else {
                continue;
            };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                None => out.push((pid, g.clone())),
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "matmul").unwrap();
                let n = node.value.last_dim();
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    T::gemm(m, n, k, g, false, self.value(*b).data(), true, ga, true);
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    T::gemm(k, m, n, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for (x, &y) in gv.iter_mut().zip(g) {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let o = self.value(other).data();
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for i in 0..g.len() {
                            gv[i] = gv[i] + g[i] * o[i];
                        }
                    }
                }
            }
            Op::MulConst(a, c) => {
                if self.wants(*a) {
                    let gv = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        gv[i] = gv[i] + g[i] * c[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let gv = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        gv[i] = gv[i] + g[i] * *s;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i];
                    }
                }
                if self.wants(*b) {
                    let d = self.value(*b).numel();
                    let gb = accumulate(&mut grads[b.0], d);
                    for row in g.chunks_exact(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + row[j];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let gv = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            gv[i] = gv[i] + g[i];
                        }
                    }
                }
            }
            Op::Swish(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let gv = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        let s = sigmoid(x[i]);
                        gv[i] = gv[i] + g[i] * (s + x[i] * s * (T::one() - s));
                    }
                }
            }
            Op::Glu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let d2 = self.value(*a).last_dim();
                    let c = d2 / 2;
                    let gv = accumulate(&mut grads[a.0], x.len());
                    for (r, (xrow, grow)) in x.chunks_exact(d2).zip(g.chunks_exact(c)).enumerate() {
                        let gx = &mut gv[r * d2..(r + 1) * d2];
                        for j in 0..c {
                            let s = sigmoid(xrow[c + j]);
                            gx[j] = gx[j] + grow[j] * s;
                            gx[c + j] = gx[c + j] + grow[j] * xrow[j] * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let gv = accumulate(&mut grads[x.0], g.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |a: usize| (o * axis_len + a) * inner + i;
                            let dot: T = (0..*axis_len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..*axis_len {
                                gv[at(a)] = gv[at(a)] + y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let xs = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = if self.wants(*x) { Some(vec![T::zero(); xs.len()]) } else { None };
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..mean.len() {
                    let xrow = &xs[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mean[r]) * rstd[r];
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                        dxhat[j] = grow[j] * gam[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], &dgamma);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], &dbeta);
                }
            }
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                batch,
                time,
                lens,
            } => {
                let xs = self.value(*x).data();
                let ks = self.value(*kernel).data();
                let (ksize, c) = self.dims2(*kernel, "depthwise_conv1d").unwrap();
                let half = ksize / 2;
                let mut dx = vec![T::zero(); xs.len()];
                let mut dk = vec![T::zero(); ks.len()];
                let mut db = vec![T::zero(); c];
                for b in 0..*batch {
                    for t in 0..*time {
                        let grow = &g[(b * time + t) * c..(b * time + t + 1) * c];
                        for j in 0..c {
                            db[j] = db[j] + grow[j];
                        }
                        for kk in 0..ksize {
                            let src = t as isize + kk as isize - half as isize;
                            if src < 0 || src as usize >= lens[b] {
                                continue;
                            }
                            let s = b * time + src as usize;
                            for j in 0..c {
                                dx[s * c + j] = dx[s * c + j] + ks[kk * c + j] * grow[j];
                                dk[kk * c + j] = dk[kk * c + j] + xs[s * c + j] * grow[j];
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*kernel) {
                    add_into(&mut grads[kernel.0], &dk);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        add_into(&mut grads[b.0], &db);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                spec,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *bias, spec, probs, grads),
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = self.value(*table).last_dim();
                    let gt = accumulate(&mut grads[table.0], self.value(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let gv = accumulate(&mut grads[a.0], self.value(*a).numel());
                    for x in gv.iter_mut() {
                        *x = *x + g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).last_dim();
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for (r, prow) in probs.chunks_exact(vocab).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let grow = &mut gl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            grow[j] = grow[j] + scale * prow[j];
                        }
                        grow[targets[r]] = grow[targets[r]] - scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        spec: &AttentionSpec,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let d = self.value(q).last_dim();
        let h = spec.heads;
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (lq, lk) = (spec.q_len, spec.k_len);
        let bw = spec.bias_width();
        let mut dq = vec![T::zero(); qs.len()];
        let mut dk = vec![T::zero(); ks.len()];
        let mut dv = vec![T::zero(); vs.len()];
        let mut dbias = vec![T::zero(); h * bw];
        let mut dp = vec![T::zero(); lk];
        for b in 0..spec.batch {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..lq {
                    let p = &probs[((b * h + head) * lq + i) * lk..((b * h + head) * lq + i + 1) * lk];
                    let qi = (b * lq + i) * d + c0;
                    let grow = &g[qi..qi + dh];
                    let mut pdp = T::zero();
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = (b * lk + j) * d + c0;
                        dp[j] = kernels::dot(grow, &vs[vj..vj + dh]);
                        pdp = pdp + p[j] * dp[j];
                        for c in 0..dh {
                            dv[vj + c] = dv[vj + c] + p[j] * grow[c];
                        }
                    }
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let dlogit = p[j] * (dp[j] - pdp);
                        if bias.is_some() {
                            let bi = head * bw + spec.rel_index(i, j);
                            dbias[bi] = dbias[bi] + dlogit;
                        }
                        let kj = (b * lk + j) * d + c0;
                        let ds = dlogit * scale;
                        for c in 0..dh {
                            dq[qi + c] = dq[qi + c] + ds * ks[kj + c];
                            dk[kj + c] = dk[kj + c] + ds * qs[qi + c];
                        }
                    }
                }
            }
        }
        if self.wants(q) {
            add_into(&mut grads[q.0], &dq);
        }
        if self.wants(k) {
            add_into(&mut grads[k.0], &dk);
        }
        if self.wants(v) {
            add_into(&mut grads[v.0], &dv);
        }
        if let Some(bv) = bias {
            if self.wants(bv) {
                add_into(&mut grads[bv.0], &dbias);
            }
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, src: &[T]) {
    let dst = accumulate(slot, src.len());
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}
