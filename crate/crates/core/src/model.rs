//! The encoder: width-derived configuration (aspect ratio 128), rotary
//! positions, full non-causal attention with 1/width logit scaling,
//! pre-norm blocks with a gated-SiLU MLP, MLM masking and loss, and the
//! checkpoint format.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AdError, NodeId, Tape, Tensor};
use crate::tokenizer::{Vocab, MASK, N_SPECIALS, PAD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("width {0} is not divisible by 128")]
    IndivisibleWidth(usize),
    #[error("batch is ragged: sequence {idx} has length {got}, expected {expected}")]
    RaggedBatch {
        idx: usize,
        got: usize,
        expected: usize,
    },
    #[error("sequence length {0} exceeds max_len {1}")]
    TooLong(usize, usize),
    #[error("autodiff: {0}")]
    Ad(#[from] AdError),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
}

pub const HEAD_DIM: usize = 128;
pub const ASPECT_RATIO: usize = 128;

/// Hyperparameters derived from width: depth = n_heads = width/128, so the
/// attention-map channel count is exactly depth squared.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn from_width(width: usize, vocab_size: usize, max_len: usize) -> Result<Self, ModelError> {
        if width == 0 || width % ASPECT_RATIO != 0 {
            return Err(ModelError::IndivisibleWidth(width));
        }
        let depth = width / ASPECT_RATIO;
        // 8/3 * width rounded to the nearest multiple of 64
        let mlp_hidden = (((8.0 * width as f64 / 3.0) / 64.0).round() as usize).max(1) * 64;
        Ok(ModelConfig {
            width,
            depth,
            n_heads: depth,
            head_dim: HEAD_DIM,
            mlp_hidden,
            vocab_size,
            max_len,
            rope_base: 10000.0,
        })
    }

    /// depth * n_heads; equals (width/128)^2.
    pub fn attn_channels(&self) -> usize {
        self.depth * self.n_heads
    }
}

/// Attention logits are scaled by 1/width, not the usual 1/sqrt(head_dim).
pub fn attn_logit_multiplier(width: usize) -> f64 {
    1.0 / width as f64
}

/// Rotate each 2-plane of (B, H, T, head_dim) by position * base^(-2i/D).
pub fn rope_apply(t: &Tensor, positions: &[usize], base: f64) -> Result<Tensor, AdError> {
    if t.rank() != 4 {
        return Err(AdError::BadArgument {
            op: "rope",
            reason: format!("expected (B, H, T, D), got {:?}", t.shape),
        });
    }
    if t.shape[3] % 2 != 0 {
        return Err(AdError::BadArgument {
            op: "rope",
            reason: format!("head dim {} must be even", t.shape[3]),
        });
    }
    Ok(crate::autodiff::rope_rotate(t, positions, base, 1.0))
}

/// Named parameters of one encoder.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Model {
    /// GPT-2-lineage init: normal(0, 0.02) everywhere except residual-out
    /// projections at 0.02/sqrt(2*depth); norm gains start at 1.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.width;
        let h = config.mlp_hidden;
        let v = config.vocab_size;
        let std = 0.02;
        let res_std = 0.02 / (2.0 * config.depth as f64).sqrt();
        let mut params = BTreeMap::new();
        params.insert("embed".to_string(), Tensor::randn(&[v, d], std, rng));
        for layer in 0..config.depth {
            let p = |name: &str| format!("layers.{layer}.{name}");
            params.insert(p("norm1.gain"), Tensor::full(&[d], 1.0));
            params.insert(p("attn.wq"), Tensor::randn(&[d, d], std, rng));
            params.insert(p("attn.wk"), Tensor::randn(&[d, d], std, rng));
            params.insert(p("attn.wv"), Tensor::randn(&[d, d], std, rng));
            params.insert(p("attn.wo"), Tensor::randn(&[d, d], res_std, rng));
            params.insert(p("norm2.gain"), Tensor::full(&[d], 1.0));
            params.insert(p("mlp.w_gate"), Tensor::randn(&[d, h], std, rng));
            params.insert(p("mlp.w_up"), Tensor::randn(&[d, h], std, rng));
            params.insert(p("mlp.w_down"), Tensor::randn(&[h, d], res_std, rng));
        }
        params.insert("final_norm.gain".to_string(), Tensor::full(&[d], 1.0));
        params.insert("unembed".to_string(), Tensor::randn(&[d, v], std, rng));
        Model { config, params }
    }
}

/// Graph handles from one forward pass; parameter nodes are keyed by name
/// so an optimizer can read gradients after backward.
pub struct GraphOutput {
    pub hidden: NodeId,
    pub logits: NodeId,
    /// One (B, H, T, T) softmax node per layer.
    pub attn: Vec<NodeId>,
    pub param_nodes: BTreeMap<String, NodeId>,
}

/// Dense forward values for inference callers.
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub logits: Tensor,
    /// Per example: (depth * n_heads) x T x T attention maps, layer-major.
    pub attn_maps: Vec<Tensor>,
}

impl Model {
    /// Build the forward graph on `tape`. `positions` defaults to 0..T.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input_ids: &[Vec<u32>],
        positions: Option<&[usize]>,
    ) -> Result<GraphOutput, ModelError> {
        let cfg = &self.config;
        let t = input_ids.first().map(|s| s.len()).unwrap_or(0);
        for (idx, seq) in input_ids.iter().enumerate() {
            if seq.len() != t {
                return Err(ModelError::RaggedBatch {
                    idx,
                    got: seq.len(),
                    expected: t,
                });
            }
        }
        if t > cfg.max_len {
            return Err(ModelError::TooLong(t, cfg.max_len));
        }
        let default_positions: Vec<usize> = (0..t).collect();
        let positions = positions.unwrap_or(&default_positions);
        if positions.iter().any(|&p| p >= cfg.max_len) {
            return Err(ModelError::TooLong(
                *positions.iter().max().unwrap(),
                cfg.max_len,
            ));
        }

        let mut param_nodes = BTreeMap::new();
        for (name, tensor) in &self.params {
            param_nodes.insert(name.clone(), tape.param(tensor));
        }
        let graph = build_graph(tape, cfg, &param_nodes, input_ids, positions)?;
        Ok(GraphOutput {
            hidden: graph.0,
            logits: graph.1,
            attn: graph.2,
            param_nodes,
        })
    }
}

/// Assemble the encoder graph from already-registered parameter leaves.
/// Exposed so gradient checks can drive the same graph from external
/// leaf nodes.
pub fn build_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    param_nodes: &BTreeMap<String, NodeId>,
    input_ids: &[Vec<u32>],
    positions: &[usize],
) -> Result<(NodeId, NodeId, Vec<NodeId>), ModelError> {
    let b = input_ids.len();
    let t = input_ids.first().map(|s| s.len()).unwrap_or(0);
    {
        let flat_ids: Vec<usize> = input_ids
            .iter()
            .flatten()
            .map(|&id| id as usize)
            .collect();
        let mut x = tape.embedding(param_nodes["embed"], &flat_ids, &[b, t])?;

        // PAD columns excluded from every softmax row
        let mut pad_mask = Tensor::zeros(&[b, cfg.n_heads, t, t]);
        for (bi, seq) in input_ids.iter().enumerate() {
            for (j, &id) in seq.iter().enumerate() {
                if id == PAD {
                    for hh in 0..cfg.n_heads {
                        for i in 0..t {
                            pad_mask.data[((bi * cfg.n_heads + hh) * t + i) * t + j] = -1e30;
                        }
                    }
                }
            }
        }
        let pad_mask = tape.constant(&pad_mask);

        let mut attn = Vec::with_capacity(cfg.depth);
        for layer in 0..cfg.depth {
            let p = |name: &str| param_nodes[&format!("layers.{layer}.{name}")];

            // attention sublayer
            let normed = tape.rms_norm(x, p("norm1.gain"))?;
            let q = tape.matmul(normed, p("attn.wq"))?;
            let k = tape.matmul(normed, p("attn.wk"))?;
            let v = tape.matmul(normed, p("attn.wv"))?;
            let split = |tape: &mut Tape, n: NodeId| -> Result<NodeId, AdError> {
                let r = tape.reshape(n, &[b, t, cfg.n_heads, cfg.head_dim])?;
                tape.transpose(r, 1, 2)
            };
            let q = split(tape, q)?;
            let k = split(tape, k)?;
            let v = split(tape, v)?;
            let q = tape.rope(q, positions, cfg.rope_base)?;
            let k = tape.rope(k, positions, cfg.rope_base)?;
            let kt = tape.transpose(k, 2, 3)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, attn_logit_multiplier(cfg.width))?;
            let scores = tape.add(scores, pad_mask)?;
            let maps = tape.softmax_rows(scores)?;
            attn.push(maps);
            let ctx = tape.matmul(maps, v)?;
            let ctx = tape.transpose(ctx, 1, 2)?;
            let ctx = tape.reshape(ctx, &[b, t, cfg.width])?;
            let ctx = tape.matmul(ctx, p("attn.wo"))?;
            x = tape.add(x, ctx)?;

            // gated MLP sublayer
            let normed = tape.rms_norm(x, p("norm2.gain"))?;
            let gate = tape.matmul(normed, p("mlp.w_gate"))?;
            let gate = tape.silu(gate)?;
            let up = tape.matmul(normed, p("mlp.w_up"))?;
            let gated = tape.mul(gate, up)?;
            let down = tape.matmul(gated, p("mlp.w_down"))?;
            x = tape.add(x, down)?;
        }

        let hidden = tape.rms_norm(x, param_nodes["final_norm.gain"])?;
        let logits = tape.matmul(hidden, param_nodes["unembed"])?;
        Ok((hidden, logits, attn))
    }
}

impl Model {
    /// Inference forward: values only, attention maps exported per example.
    pub fn forward(
        &self,
        input_ids: &[Vec<u32>],
        positions: Option<&[usize]>,
    ) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        let graph = self.forward_on_tape(&mut tape, input_ids, positions)?;
        let b = input_ids.len();
        let t = input_ids.first().map(|s| s.len()).unwrap_or(0);
        let channels = self.config.attn_channels();
        let mut attn_maps = Vec::with_capacity(b);
        for bi in 0..b {
            let mut data = Vec::with_capacity(channels * t * t);
            for &layer_node in &graph.attn {
                let lt = tape.value(layer_node);
                let per_batch = self.config.n_heads * t * t;
                data.extend_from_slice(&lt.data[bi * per_batch..(bi + 1) * per_batch]);
            }
            attn_maps.push(Tensor::new(vec![channels, t, t], data).unwrap());
        }
        Ok(ForwardOutput {
            hidden: tape.value(graph.hidden).clone(),
            logits: tape.value(graph.logits).clone(),
            attn_maps,
        })
    }
}

/// MLM-masked inputs: labels hold the original id exactly at masked
/// positions and `IGNORE` elsewhere.
pub const IGNORE: i64 = -1;

#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub input_ids: Vec<Vec<u32>>,
    pub labels: Vec<Vec<i64>>,
    pub mask_fraction_realized: f64,
    /// True when no position was maskable (all specials).
    pub nothing_masked: bool,
}

/// BERT-style masking: each non-special position is selected with
/// probability 0.15; a selected position becomes MASK (80%), a random
/// non-special token (10%), or stays unchanged (10%).
pub fn mlm_mask(batch: &[Vec<u32>], vocab: &Vocab, rng: &mut impl Rng) -> MaskedBatch {
    let vocab_size = vocab.size() as u32;
    let mut input_ids = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut maskable = 0usize;
    let mut masked = 0usize;
    for seq in batch {
        let mut ids = seq.clone();
        let mut lab = vec![IGNORE; seq.len()];
        for (i, &orig) in seq.iter().enumerate() {
            if orig < N_SPECIALS {
                continue;
            }
            maskable += 1;
            if rng.gen::<f64>() >= 0.15 {
                continue;
            }
            masked += 1;
            lab[i] = orig as i64;
            let roll = rng.gen::<f64>();
            if roll < 0.8 {
                ids[i] = MASK;
            } else if roll < 0.9 {
                ids[i] = rng.gen_range(N_SPECIALS..vocab_size);
            }
            // else: keep the original token
        }
        input_ids.push(ids);
        labels.push(lab);
    }
    // tiny batches can roll zero selections; force one so the loss is
    // always defined when anything is maskable
    if maskable > 0 && masked == 0 {
        let positions: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| {
                seq.iter()
                    .enumerate()
                    .filter(|(_, &id)| id >= N_SPECIALS)
                    .map(move |(i, _)| (s, i))
            })
            .collect();
        let (s, i) = positions[rng.gen_range(0..positions.len())];
        labels[s][i] = batch[s][i] as i64;
        input_ids[s][i] = MASK;
        masked = 1;
    }
    MaskedBatch {
        input_ids,
        labels,
        mask_fraction_realized: if maskable == 0 {
            0.0
        } else {
            masked as f64 / maskable as f64
        },
        nothing_masked: maskable == 0,
    }
}

/// Mean cross-entropy over labeled positions only.
pub fn mlm_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[Vec<i64>],
) -> Result<NodeId, ModelError> {
    let shape = tape.shape(logits).to_vec();
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(logits, &[b * t, v])?;
    let targets: Vec<i64> = labels.iter().flatten().copied().collect();
    Ok(tape.cross_entropy(flat, &targets, IGNORE)?)
}

// ---- checkpoint format ----
// "polyomic-checkpoint v1", key=value config lines, blank line, then per
// tensor: a "name dim0 dim1 ..." line and raw little-endian f64 data.

/// Serialize a bare tensor map (head or probe parameters) in the same
/// layout as a checkpoint, without the model-config header.
pub fn save_tensors(params: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"polyomic-tensors v1\n");
    out.extend_from_slice(format!("tensors={}\n\n", params.len()).as_bytes());
    for (name, tensor) in params {
        let dims: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{} {}\n", name, dims.join(" ")).as_bytes());
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, ModelError> {
    let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
    let mut pos = 0usize;
    let read_line = |pos: &mut usize| -> Result<String, ModelError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(bad("unexpected end of file"));
        }
        let line = String::from_utf8(bytes[start..*pos].to_vec())
            .map_err(|_| bad("non-utf8 header"))?;
        *pos += 1;
        Ok(line)
    };
    if read_line(&mut pos)? != "polyomic-tensors v1" {
        return Err(bad("missing version line"));
    }
    let count_line = read_line(&mut pos)?;
    let n_tensors: usize = count_line
        .strip_prefix("tensors=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing tensor count"))?;
    if !read_line(&mut pos)?.is_empty() {
        return Err(bad("missing blank separator"));
    }
    let mut params = BTreeMap::new();
    for _ in 0..n_tensors {
        let line = read_line(&mut pos)?;
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| bad("empty tensor line"))?;
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| bad("bad tensor dim")))
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        if pos + n * 8 > bytes.len() {
            return Err(bad("truncated tensor data"));
        }
        let data: Vec<f64> = bytes[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += n * 8;
        params.insert(name.to_string(), Tensor::new(shape, data).unwrap());
    }
    Ok(params)
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"polyomic-checkpoint v1\n");
    let c = &model.config;
    let header = format!(
        "width={}\ndepth={}\nn_heads={}\nhead_dim={}\nmlp_hidden={}\nvocab_size={}\nmax_len={}\nrope_base={}\ntensors={}\n\n",
        c.width, c.depth, c.n_heads, c.head_dim, c.mlp_hidden, c.vocab_size, c.max_len, c.rope_base,
        model.params.len()
    );
    out.extend_from_slice(header.as_bytes());
    for (name, tensor) in &model.params {
        let dims: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{} {}\n", name, dims.join(" ")).as_bytes());
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model, ModelError> {
    let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
    let mut pos = 0usize;
    let read_line = |pos: &mut usize| -> Result<String, ModelError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(bad("unexpected end of file"));
        }
        let line = String::from_utf8(bytes[start..*pos].to_vec())
            .map_err(|_| bad("non-utf8 header"))?;
        *pos += 1;
        Ok(line)
    };

    if read_line(&mut pos)? != "polyomic-checkpoint v1" {
        return Err(bad("missing version line"));
    }
    let mut kv = BTreeMap::new();
    loop {
        let line = read_line(&mut pos)?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get_usize = |k: &str| -> Result<usize, ModelError> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("missing or invalid header key '{k}'")))
    };
    let config = ModelConfig {
        width: get_usize("width")?,
        depth: get_usize("depth")?,
        n_heads: get_usize("n_heads")?,
        head_dim: get_usize("head_dim")?,
        mlp_hidden: get_usize("mlp_hidden")?,
        vocab_size: get_usize("vocab_size")?,
        max_len: get_usize("max_len")?,
        rope_base: kv
            .get("rope_base")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing rope_base"))?,
    };
    let n_tensors = get_usize("tensors")?;
    let mut params = BTreeMap::new();
    for _ in 0..n_tensors {
        let line = read_line(&mut pos)?;
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| bad("empty tensor line"))?;
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| bad("bad tensor dim")))
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        if pos + n * 8 > bytes.len() {
            return Err(bad("truncated tensor data"));
        }
        let data: Vec<f64> = bytes[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += n * 8;
        params.insert(name.to_string(), Tensor::new(shape, data).unwrap());
    }
    Ok(Model { config, params })
}
