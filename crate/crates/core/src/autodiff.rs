//! Dense-tensor reverse-mode automatic differentiation. Covers exactly the
//! primitives the encoder, heads, and probes need: batched matmul, softmax,
//! rms-norm, activations, embedding lookup, rotary application, small
//! convolutions, and the scalar losses. Everything is f64.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid argument: {reason}")]
    BadArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("zero-norm row {0} cannot be normalized")]
    ZeroNormRow(usize),
    #[error("token id {id} out of vocabulary range {vocab}")]
    BadTokenIndex { id: usize, vocab: usize },
    #[error("function is not deterministic: repeated evaluation differs")]
    NonDeterministic,
}

/// Row-major dense tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AdError::BadArgument {
                op: "tensor",
                reason: format!("shape {shape:?} does not match data length {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand::distributions::Distribution;
        let normal = rand_distr_standard();
        let data = (0..shape.iter().product())
            .map(|_| normal.sample(rng) * std)
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

// Box-Muller over the platform-stable uniform; avoids pulling in a
// distributions crate for one sampler.
struct StdNormal;
impl rand::distributions::Distribution<f64> for StdNormal {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn rand_distr_standard() -> StdNormal {
    StdNormal
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// Bias broadcast over the last axis.
    AddBias(NodeId, NodeId),
    /// Bias per channel of a (B, C, H, W) tensor.
    AddChanBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId, usize, usize),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    RmsNorm(NodeId, NodeId),
    RowNormalize(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Embedding(NodeId, Vec<usize>),
    Slice(NodeId, usize, usize, usize),
    Concat(Vec<NodeId>, usize),
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    MeanLastAxis(NodeId),
    Rope(NodeId, Vec<usize>, f64),
    CrossEntropy(NodeId, Vec<i64>, i64),
    Mse(NodeId, Tensor),
    BceWithLogits(NodeId, Vec<f64>, Vec<bool>),
    Conv2d(NodeId, NodeId, usize),
    PairConcat(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in execution order; `backward` replays
/// them once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    /// Trainable leaf; `backward` will populate its gradient.
    pub fn param(&mut self, value: &Tensor) -> NodeId {
        self.push_unchecked(value.clone(), Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: &Tensor) -> NodeId {
        self.push_unchecked(value.clone(), Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId, AdError> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite(name));
        }
        let requires_grad = op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape != tb.shape {
            return Err(AdError::ShapeMismatch {
                op: "add",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::Add(a, b), "add")
    }

    /// a + bias where bias is 1-D over a's last axis.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AdError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[bias].value);
        let d = *ta.shape.last().unwrap_or(&0);
        if tb.shape != vec![d] {
            return Err(AdError::ShapeMismatch {
                op: "add_bias",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data[i % d];
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::AddBias(a, bias), "add_bias")
    }

    /// a + bias where a is (B, C, H, W) and bias is (C,).
    pub fn add_chan_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AdError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[bias].value);
        if ta.rank() != 4 || tb.shape != vec![ta.shape[1]] {
            return Err(AdError::ShapeMismatch {
                op: "add_chan_bias",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let (c, hw) = (ta.shape[1], ta.shape[2] * ta.shape[3]);
        let mut data = ta.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data[(i / hw) % c];
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::AddChanBias(a, bias), "add_chan_bias")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape != tb.shape {
            return Err(AdError::ShapeMismatch {
                op: "mul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * factor).collect(),
        };
        self.push(value, Op::Scale(a, factor), "scale")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    // ---- linear algebra ----

    /// Batched matmul. `a` is (..., m, k); `b` is either (k, n), shared
    /// across batches, or has the same leading dims as `a` with trailing
    /// (k, n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let value = matmul_forward(ta, tb)?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: NodeId, ax0: usize, ax1: usize) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        if ax0 >= ta.rank() || ax1 >= ta.rank() {
            return Err(AdError::BadArgument {
                op: "transpose",
                reason: format!("axes ({ax0}, {ax1}) out of range for rank {}", ta.rank()),
            });
        }
        let value = transpose_tensor(ta, ax0, ax1);
        self.push(value, Op::Transpose(a, ax0, ax1), "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                left: ta.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: ta.data.clone(),
        };
        self.push(value, Op::Reshape(a), "reshape")
    }

    // ---- nonlinearities ----

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let d = *ta.shape.last().ok_or(AdError::BadArgument {
            op: "softmax",
            reason: "rank-0 input".to_string(),
        })?;
        let mut data = ta.data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::SoftmaxRows(a), "softmax")
    }

    /// RMS normalization over the last axis with a learned gain vector.
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId, AdError> {
        let (ta, tg) = (&self.nodes[a].value, &self.nodes[gain].value);
        let d = *ta.shape.last().unwrap_or(&0);
        if tg.shape != vec![d] {
            return Err(AdError::ShapeMismatch {
                op: "rms_norm",
                left: ta.shape.clone(),
                right: tg.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(d) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            for (v, g) in row.iter_mut().zip(&tg.data) {
                *v *= r * g;
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::RmsNorm(a, gain), "rms_norm")
    }

    /// L2-normalize each row (last axis) to unit length.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let d = *ta.shape.last().unwrap_or(&0);
        let mut data = ta.data.clone();
        for (ri, row) in data.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AdError::ZeroNormRow(ri));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push(value, Op::RowNormalize(a), "row_normalize")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| gelu_fwd(x)).collect(),
        };
        self.push(value, Op::Gelu(a), "gelu")
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x * sigmoid(x)).collect(),
        };
        self.push(value, Op::Silu(a), "silu")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    // ---- structure ----

    /// Look up rows of `table` (V, d); output shape is ids-prefix + [d].
    pub fn embedding(
        &mut self,
        table: NodeId,
        ids: &[usize],
        prefix_shape: &[usize],
    ) -> Result<NodeId, AdError> {
        let tt = &self.nodes[table].value;
        if tt.rank() != 2 {
            return Err(AdError::BadArgument {
                op: "embedding",
                reason: format!("table must be 2-D, got {:?}", tt.shape),
            });
        }
        if prefix_shape.iter().product::<usize>() != ids.len() {
            return Err(AdError::BadArgument {
                op: "embedding",
                reason: "prefix shape does not match id count".to_string(),
            });
        }
        let (v, d) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AdError::BadTokenIndex { id, vocab: v });
            }
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(d);
        self.push(
            Tensor { shape, data },
            Op::Embedding(table, ids.to_vec()),
            "embedding",
        )
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        if axis >= ta.rank() || end > ta.shape[axis] || start >= end {
            return Err(AdError::BadArgument {
                op: "slice",
                reason: format!(
                    "range {start}..{end} on axis {axis} invalid for shape {:?}",
                    ta.shape
                ),
            });
        }
        let outer: usize = ta.shape[..axis].iter().product();
        let span = ta.shape[axis];
        let inner: usize = ta.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * span * inner;
            data.extend_from_slice(&ta.data[base + start * inner..base + end * inner]);
        }
        let mut shape = ta.shape.clone();
        shape[axis] = end - start;
        self.push(Tensor { shape, data }, Op::Slice(a, axis, start, end), "slice")
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(AdError::BadArgument {
                op: "concat",
                reason: "no inputs".to_string(),
            });
        }
        let first = self.nodes[parts[0]].value.shape.clone();
        if axis >= first.len() {
            return Err(AdError::BadArgument {
                op: "concat",
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = &self.nodes[p].value.shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.clone(),
                });
            }
            total_axis += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p].value;
                let span = t.shape[axis];
                data.extend_from_slice(&t.data[o * span * inner..(o + 1) * span * inner]);
            }
        }
        self.push(
            Tensor { shape, data },
            Op::Concat(parts.to_vec(), axis),
            "concat",
        )
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(a), "reduce_sum")
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let s: f64 = ta.data.iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(s), Op::ReduceMean(a), "reduce_mean")
    }

    /// Mean over the last axis; (..., n) -> (...).
    pub fn mean_last_axis(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        let d = *ta.shape.last().ok_or(AdError::BadArgument {
            op: "mean_last_axis",
            reason: "rank-0 input".to_string(),
        })?;
        let data: Vec<f64> = ta
            .data
            .chunks(d)
            .map(|row| row.iter().sum::<f64>() / d as f64)
            .collect();
        let shape = ta.shape[..ta.rank() - 1].to_vec();
        self.push(Tensor { shape, data }, Op::MeanLastAxis(a), "mean_last_axis")
    }

    /// Rotary position application on (B, H, T, D); D even; angle for the
    /// i-th plane at position p is p * base^(-2i/D).
    pub fn rope(&mut self, a: NodeId, positions: &[usize], base: f64) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        if ta.rank() != 4 {
            return Err(AdError::BadArgument {
                op: "rope",
                reason: format!("expected (B, H, T, D), got {:?}", ta.shape),
            });
        }
        let (t, d) = (ta.shape[2], ta.shape[3]);
        if d % 2 != 0 {
            return Err(AdError::BadArgument {
                op: "rope",
                reason: format!("head dim {d} must be even"),
            });
        }
        if positions.len() != t {
            return Err(AdError::BadArgument {
                op: "rope",
                reason: "positions length must equal sequence length".to_string(),
            });
        }
        let value = rope_rotate(ta, positions, base, 1.0);
        self.push(value, Op::Rope(a, positions.to_vec(), base), "rope")
    }

    // ---- losses ----

    /// Mean cross-entropy over rows of (N, V) logits whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<NodeId, AdError> {
        let tl = &self.nodes[logits].value;
        if tl.rank() != 2 || tl.shape[0] != targets.len() {
            return Err(AdError::BadArgument {
                op: "cross_entropy",
                reason: format!(
                    "logits {:?} incompatible with {} targets",
                    tl.shape,
                    targets.len()
                ),
            });
        }
        let v = tl.shape[1];
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, &t) in tl.data.chunks(v).zip(targets) {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= v {
                return Err(AdError::BadTokenIndex {
                    id: t as usize,
                    vocab: v,
                });
            }
            total += log_sum_exp(row) - row[t as usize];
            count += 1;
        }
        if count == 0 {
            return Err(AdError::BadArgument {
                op: "cross_entropy",
                reason: "all targets ignored".to_string(),
            });
        }
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy(logits, targets.to_vec(), ignore_index),
            "cross_entropy",
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, AdError> {
        let tp = &self.nodes[pred].value;
        if tp.shape != target.shape {
            return Err(AdError::ShapeMismatch {
                op: "mse",
                left: tp.shape.clone(),
                right: target.shape.clone(),
            });
        }
        let s: f64 = tp
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / tp.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mse(pred, target.clone()), "mse")
    }

    /// Mean binary cross-entropy on logits, restricted to masked-in
    /// positions. Numerically stable log1p form.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        mask: &[bool],
    ) -> Result<NodeId, AdError> {
        let tl = &self.nodes[logits].value;
        if tl.numel() != targets.len() || tl.numel() != mask.len() {
            return Err(AdError::BadArgument {
                op: "bce",
                reason: format!(
                    "{} logits vs {} targets vs {} mask entries",
                    tl.numel(),
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for ((&x, &t), &m) in tl.data.iter().zip(targets).zip(mask) {
            if !m {
                continue;
            }
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            count += 1;
        }
        if count == 0 {
            return Err(AdError::BadArgument {
                op: "bce",
                reason: "empty mask".to_string(),
            });
        }
        self.push(
            Tensor::scalar(total / count as f64),
            Op::BceWithLogits(logits, targets.to_vec(), mask.to_vec()),
            "bce",
        )
    }

    /// 2-D convolution of (B, Cin, H, W) with kernels (Cout, Cin, kh, kw),
    /// symmetric zero padding `pad`; 3x3 with pad 1 and 1x1 with pad 0
    /// preserve spatial dims.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, pad: usize) -> Result<NodeId, AdError> {
        let (ti, tk) = (&self.nodes[input].value, &self.nodes[kernel].value);
        if ti.rank() != 4 || tk.rank() != 4 || ti.shape[1] != tk.shape[1] {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                left: ti.shape.clone(),
                right: tk.shape.clone(),
            });
        }
        let value = conv2d_forward(ti, tk, pad)?;
        self.push(value, Op::Conv2d(input, kernel, pad), "conv2d")
    }

    /// Pairwise feature map: (L, k) -> (1, 2k, L, L) where channel block
    /// [0, k) at (i, j) is row i and block [k, 2k) is row j.
    pub fn pair_concat(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let ta = &self.nodes[a].value;
        if ta.rank() != 2 {
            return Err(AdError::BadArgument {
                op: "pair_concat",
                reason: format!("expected (L, k), got {:?}", ta.shape),
            });
        }
        let (l, k) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; 2 * k * l * l];
        for c in 0..k {
            for i in 0..l {
                let vi = ta.data[i * k + c];
                for j in 0..l {
                    data[c * l * l + i * l + j] = vi;
                }
            }
        }
        for c in 0..k {
            for j in 0..l {
                let vj = ta.data[j * k + c];
                for i in 0..l {
                    data[(k + c) * l * l + i * l + j] = vj;
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![1, 2 * k, l, l],
                data,
            },
            Op::PairConcat(a),
            "pair_concat",
        )
    }

    // ---- backward ----

    /// Populate gradients of every `requires_grad` node reachable from the
    /// scalar `loss`. Gradients accumulate additively across uses.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AdError> {
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar() {
            return Err(AdError::NonScalarLoss(lt.shape.clone()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = Some(gout);
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op, &gout)?;
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, out: NodeId, op: &Op, gout: &Tensor) -> Result<(), AdError> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, gout.clone());
                self.accumulate(*b, gout.clone());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(*a, gout.clone());
                let d = *self.nodes[*bias].value.shape.last().unwrap();
                let mut gb = vec![0.0; d];
                for (i, v) in gout.data.iter().enumerate() {
                    gb[i % d] += v;
                }
                self.accumulate(*bias, Tensor::new(vec![d], gb).unwrap());
            }
            Op::AddChanBias(a, bias) => {
                self.accumulate(*a, gout.clone());
                let c = self.nodes[*bias].value.shape[0];
                let hw = gout.numel() / (gout.shape[0] * c);
                let mut gb = vec![0.0; c];
                for (i, v) in gout.data.iter().enumerate() {
                    gb[(i / hw) % c] += v;
                }
                self.accumulate(*bias, Tensor::new(vec![c], gb).unwrap());
            }
            Op::Mul(a, b) => {
                let ga = elemwise_mul(gout, &self.nodes[*b].value);
                let gb = elemwise_mul(gout, &self.nodes[*a].value);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, f) => {
                let mut g = gout.clone();
                for v in &mut g.data {
                    *v *= f;
                }
                self.accumulate(*a, g);
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(
                    &self.nodes[*a].value,
                    &self.nodes[*b].value,
                    gout,
                )?;
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Transpose(a, ax0, ax1) => {
                self.accumulate(*a, transpose_tensor(gout, *ax0, *ax1));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape.clone();
                self.accumulate(
                    *a,
                    Tensor {
                        shape,
                        data: gout.data.clone(),
                    },
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[out].value;
                let d = *y.shape.last().unwrap();
                let mut g = vec![0.0; y.numel()];
                for (ri, (yr, gr)) in y.data.chunks(d).zip(gout.data.chunks(d)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (i, gv) in g[ri * d..(ri + 1) * d].iter_mut().enumerate() {
                        *gv = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(
                    *a,
                    Tensor {
                        shape: y.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::RmsNorm(a, gain) => {
                let x = self.nodes[*a].value.clone();
                let gvec = self.nodes[*gain].value.clone();
                let d = *x.shape.last().unwrap();
                let n = d as f64;
                let mut gx = vec![0.0; x.numel()];
                let mut gg = vec![0.0; d];
                for (ri, (xr, gr)) in x.data.chunks(d).zip(gout.data.chunks(d)).enumerate() {
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
                    let r = 1.0 / (ms + RMS_EPS).sqrt();
                    let dot: f64 = (0..d).map(|i| gr[i] * gvec.data[i] * xr[i]).sum();
                    for i in 0..d {
                        gx[ri * d + i] =
                            r * gvec.data[i] * gr[i] - r.powi(3) * xr[i] / n * dot;
                        gg[i] += gr[i] * xr[i] * r;
                    }
                }
                self.accumulate(
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: gx,
                    },
                );
                self.accumulate(*gain, Tensor::new(vec![d], gg).unwrap());
            }
            Op::RowNormalize(a) => {
                let x = &self.nodes[*a].value;
                let d = *x.shape.last().unwrap();
                let mut gx = vec![0.0; x.numel()];
                for (ri, (xr, gr)) in x.data.chunks(d).zip(gout.data.chunks(d)).enumerate() {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum::<f64>() / (norm * norm);
                    for i in 0..d {
                        gx[ri * d + i] = (gr[i] - xr[i] * dot) / norm;
                    }
                }
                self.accumulate(
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: gx,
                    },
                );
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let g = x
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| g * gelu_grad(x))
                    .collect();
                self.accumulate(
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let g = x
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * (s * (1.0 + x * (1.0 - s)))
                    })
                    .collect();
                self.accumulate(
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let g = x
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[out].value;
                let g = y
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                let shape = y.shape.clone();
                self.accumulate(*a, Tensor { shape, data: g });
            }
            Op::Embedding(table, ids) => {
                let tt = &self.nodes[*table].value;
                let (v, d) = (tt.shape[0], tt.shape[1]);
                let mut g = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        g[id * d + c] += gout.data[row * d + c];
                    }
                }
                self.accumulate(*table, Tensor::new(vec![v, d], g).unwrap());
            }
            Op::Slice(a, axis, start, end) => {
                let x = &self.nodes[*a].value;
                let outer: usize = x.shape[..*axis].iter().product();
                let span = x.shape[*axis];
                let inner: usize = x.shape[*axis + 1..].iter().product();
                let w = end - start;
                let mut g = vec![0.0; x.numel()];
                for o in 0..outer {
                    let src = o * w * inner;
                    let dst = o * span * inner + start * inner;
                    g[dst..dst + w * inner].copy_from_slice(&gout.data[src..src + w * inner]);
                }
                self.accumulate(
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::Concat(parts, axis) => {
                let out_shape = self.nodes[out].value.shape.clone();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for &p in parts {
                    offsets.push(acc);
                    acc += self.nodes[p].value.shape[*axis];
                }
                for (pi, &p) in parts.iter().enumerate() {
                    let shape = self.nodes[p].value.shape.clone();
                    let span = shape[*axis];
                    let mut g = vec![0.0; shape.iter().product()];
                    for o in 0..outer {
                        let src = (o * total + offsets[pi]) * inner;
                        let dst = o * span * inner;
                        g[dst..dst + span * inner]
                            .copy_from_slice(&gout.data[src..src + span * inner]);
                    }
                    self.accumulate(p, Tensor { shape, data: g });
                }
            }
            Op::ReduceSum(a) => {
                let shape = self.nodes[*a].value.shape.clone();
                self.accumulate(*a, Tensor::full(&shape, gout.item()));
            }
            Op::ReduceMean(a) => {
                let shape = self.nodes[*a].value.shape.clone();
                let n: usize = shape.iter().product();
                self.accumulate(*a, Tensor::full(&shape, gout.item() / n as f64));
            }
            Op::MeanLastAxis(a) => {
                let x = &self.nodes[*a].value;
                let d = *x.shape.last().unwrap();
                let mut g = vec![0.0; x.numel()];
                for (ri, chunk) in g.chunks_mut(d).enumerate() {
                    let v = gout.data[ri] / d as f64;
                    chunk.fill(v);
                }
                self.accumulate(
                    *a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::Rope(a, positions, base) => {
                // inverse rotation
                self.accumulate(*a, rope_rotate(gout, positions, *base, -1.0));
            }
            Op::CrossEntropy(logits, targets, ignore_index) => {
                let tl = &self.nodes[*logits].value;
                let v = tl.shape[1];
                let count = targets.iter().filter(|&&t| t != *ignore_index).count() as f64;
                let scale = gout.item() / count;
                let mut g = vec![0.0; tl.numel()];
                for (ri, (row, &t)) in tl.data.chunks(v).zip(targets).enumerate() {
                    if t == *ignore_index {
                        continue;
                    }
                    let lse = log_sum_exp(row);
                    for i in 0..v {
                        let p = (row[i] - lse).exp();
                        g[ri * v + i] = scale * (p - if i as i64 == t { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(
                    *logits,
                    Tensor {
                        shape: tl.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::Mse(pred, target) => {
                let tp = &self.nodes[*pred].value;
                let scale = gout.item() * 2.0 / tp.numel() as f64;
                let g = tp
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.accumulate(
                    *pred,
                    Tensor {
                        shape: tp.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::BceWithLogits(logits, targets, mask) => {
                let tl = &self.nodes[*logits].value;
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = gout.item() / count;
                let g = tl
                    .data
                    .iter()
                    .zip(targets)
                    .zip(mask)
                    .map(|((&x, &t), &m)| {
                        if m {
                            scale * (sigmoid(x) - t)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(
                    *logits,
                    Tensor {
                        shape: tl.shape.clone(),
                        data: g,
                    },
                );
            }
            Op::Conv2d(input, kernel, pad) => {
                let (gi, gk) = conv2d_backward(
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    gout,
                    *pad,
                );
                self.accumulate(*input, gi);
                self.accumulate(*kernel, gk);
            }
            Op::PairConcat(a) => {
                let x = &self.nodes[*a].value;
                let (l, k) = (x.shape[0], x.shape[1]);
                let mut g = vec![0.0; l * k];
                for c in 0..k {
                    for i in 0..l {
                        let mut s = 0.0;
                        for j in 0..l {
                            s += gout.data[c * l * l + i * l + j];
                        }
                        g[i * k + c] += s;
                    }
                }
                for c in 0..k {
                    for j in 0..l {
                        let mut s = 0.0;
                        for i in 0..l {
                            s += gout.data[(k + c) * l * l + i * l + j];
                        }
                        g[j * k + c] += s;
                    }
                }
                self.accumulate(*a, Tensor::new(vec![l, k], g).unwrap());
            }
        }
        Ok(())
    }
}

const RMS_EPS: f64 = 1e-8;

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::AddBias(a, b)
        | Op::AddChanBias(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::RmsNorm(a, b)
        | Op::Conv2d(a, b, _) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a, _, _)
        | Op::Reshape(a)
        | Op::SoftmaxRows(a)
        | Op::RowNormalize(a)
        | Op::Gelu(a)
        | Op::Silu(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Embedding(a, _)
        | Op::Slice(a, _, _, _)
        | Op::ReduceSum(a)
        | Op::ReduceMean(a)
        | Op::MeanLastAxis(a)
        | Op::Rope(a, _, _)
        | Op::CrossEntropy(a, _, _)
        | Op::Mse(a, _)
        | Op::BceWithLogits(a, _, _)
        | Op::PairConcat(a) => vec![*a],
        Op::Concat(parts, _) => parts.clone(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// tanh-approximation GELU
fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x.powi(3));
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn elemwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

fn transpose_tensor(t: &Tensor, ax0: usize, ax1: usize) -> Tensor {
    if ax0 == ax1 {
        return t.clone();
    }
    let rank = t.rank();
    let mut out_shape = t.shape.clone();
    out_shape.swap(ax0, ax1);
    let in_strides = strides(&t.shape);
    let out_strides = strides(&out_shape);
    let mut data = vec![0.0; t.numel()];
    let mut idx = vec![0usize; rank];
    for (flat, &v) in t.data.iter().enumerate() {
        // unravel flat index into `idx`
        let mut rem = flat;
        for (i, s) in in_strides.iter().enumerate() {
            idx[i] = rem / s;
            rem %= s;
        }
        idx.swap(ax0, ax1);
        let mut out_flat = 0;
        for (i, s) in out_strides.iter().enumerate() {
            out_flat += idx[i] * s;
        }
        data[out_flat] = v;
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
    let mismatch = || AdError::ShapeMismatch {
        op: "matmul",
        left: a.shape.clone(),
        right: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let shared_b = b.rank() == 2 && a.rank() > 2;
    if !shared_b && b.shape[..b.rank() - 2] != a.shape[..a.rank() - 2] {
        return Err(mismatch());
    }
    let (kb, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if kb != k {
        return Err(mismatch());
    }
    let batches: usize = a.shape[..a.rank() - 2].iter().product();
    let mut out_shape = a.shape[..a.rank() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut data = vec![0.0; batches * m * n];
    for bi in 0..batches {
        let av = &a.data[bi * m * k..(bi + 1) * m * k];
        let bv = if shared_b {
            &b.data[..]
        } else {
            &b.data[bi * k * n..(bi + 1) * k * n]
        };
        let cv = &mut data[bi * m * n..(bi + 1) * m * n];
        matmul_2d(av, bv, m, k, n, cv, false);
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// C (+)= A @ B with A (m, k), B (k, n); ikj order for locality.
fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c.fill(0.0);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// A^T @ B with A (m, k), B (m, n) -> (k, n), accumulating into c.
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// A @ B^T with A (m, n), B (k, n) -> (m, k), accumulating into c.
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + j] += s;
        }
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor), AdError> {
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let n = b.shape[b.rank() - 1];
    let shared_b = b.rank() == 2 && a.rank() > 2;
    let batches: usize = a.shape[..a.rank() - 2].iter().product();
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for bi in 0..batches {
        let gv = &gout.data[bi * m * n..(bi + 1) * m * n];
        let av = &a.data[bi * m * k..(bi + 1) * m * k];
        let bv = if shared_b {
            &b.data[..]
        } else {
            &b.data[bi * k * n..(bi + 1) * k * n]
        };
        // dA = dC @ B^T
        matmul_a_bt(gv, bv, m, n, k, &mut ga[bi * m * k..(bi + 1) * m * k]);
        // dB = A^T @ dC (summed over batches when B is shared)
        let gb_slice = if shared_b {
            &mut gb[..]
        } else {
            &mut gb[bi * k * n..(bi + 1) * k * n]
        };
        matmul_at_b(av, gv, m, k, n, gb_slice);
    }
    Ok((
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: b.shape.clone(),
            data: gb,
        },
    ))
}

pub(crate) fn rope_rotate(t: &Tensor, positions: &[usize], base: f64, sign: f64) -> Tensor {
    let (b, h, tt, d) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    let half = d / 2;
    // angle table: positions x planes
    let mut cos_t = vec![0.0; tt * half];
    let mut sin_t = vec![0.0; tt * half];
    for (pi, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let theta = sign * p as f64 * base.powf(-2.0 * i as f64 / d as f64);
            cos_t[pi * half + i] = theta.cos();
            sin_t[pi * half + i] = theta.sin();
        }
    }
    let mut data = vec![0.0; t.numel()];
    for bh in 0..b * h {
        for pi in 0..tt {
            let off = (bh * tt + pi) * d;
            for i in 0..half {
                let (c, s) = (cos_t[pi * half + i], sin_t[pi * half + i]);
                let x0 = t.data[off + 2 * i];
                let x1 = t.data[off + 2 * i + 1];
                data[off + 2 * i] = x0 * c - x1 * s;
                data[off + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Tensor, AdError> {
    let (b, cin, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (cout, _, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let ibase = (bi * cin + ci) * h * w;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kv = kernel.data[((co * cin + ci) * kh + dy) * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy + dy;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let orow = obase + oy * ow;
                            let irow = ibase + iy * w;
                            for ox in 0..ow {
                                let ix = ox + dx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                out[orow + ox] += kv * input.data[irow + ix - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![b, cout, oh, ow],
        data: out,
    })
}

fn conv2d_backward(input: &Tensor, kernel: &Tensor, gout: &Tensor, pad: usize) -> (Tensor, Tensor) {
    let (b, cin, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (cout, _, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    let (oh, ow) = (gout.shape[2], gout.shape[3]);
    let mut gi = vec![0.0; input.numel()];
    let mut gk = vec![0.0; kernel.numel()];
    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let ibase = (bi * cin + ci) * h * w;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kidx = ((co * cin + ci) * kh + dy) * kw + dx;
                        let kv = kernel.data[kidx];
                        let mut ks = 0.0;
                        for oy in 0..oh {
                            let iy = oy + dy;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let orow = obase + oy * ow;
                            let irow = ibase + iy * w;
                            for ox in 0..ow {
                                let ix = ox + dx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let g = gout.data[orow + ox];
                                gi[irow + ix - pad] += kv * g;
                                ks += input.data[irow + ix - pad] * g;
                            }
                        }
                        gk[kidx] += ks;
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: input.shape.clone(),
            data: gi,
        },
        Tensor {
            shape: kernel.shape.clone(),
            data: gk,
        },
    )
}

/// Central finite-difference check of `f`'s analytic gradients. `f` builds
/// a scalar loss from leaf nodes for `params`; a sample of coordinates per
/// parameter is perturbed by `eps`. Returns the max relative error
/// |analytic - numeric| / max(1, |numeric|). Non-deterministic `f` is
/// detected by a repeated baseline evaluation.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    max_coords_per_param: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AdError>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<Tensor>), AdError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &ids)?;
        let loss_val = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(id)))
            })
            .collect();
        Ok((loss_val, grads))
    };

    let (base_loss, grads) = eval(params)?;
    let (repeat_loss, _) = eval(params)?;
    if base_loss.to_bits() != repeat_loss.to_bits() {
        return Err(AdError::NonDeterministic);
    }

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            (0..max_coords_per_param)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for ci in coords {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + eps;
            let (lp, _) = eval_loss_only(&f, &work)?;
            work[pi].data[ci] = orig - eps;
            let (lm, _) = eval_loss_only(&f, &work)?;
            work[pi].data[ci] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads[pi].data[ci];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

fn eval_loss_only<F>(f: &F, values: &[Tensor]) -> Result<(f64, ()), AdError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AdError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = values.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &ids)?;
    Ok((tape.value(loss).item(), ()))
}
