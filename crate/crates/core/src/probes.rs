//! Frozen-backbone probes: the low-rank contrastive projector over paired
//! embeddings, and the attention-map convolutional contact probe. Backbone
//! parameters never receive gradients here — embeddings and attention
//! tensors arrive as plain data.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, NodeId, Tape, Tensor};
use crate::evals::EvalError;
use crate::optim::{adamw_step, LrGroup, OptimError, OptimState};
use crate::rng::derive;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("need at least 2 training pairs, got {0}")]
    TooFewPairs(usize),
    #[error("embedding batches disagree: {0} x-rows vs {1} y-rows")]
    PairCountMismatch(usize, usize),
    #[error("attention tensor has {got} channels, probe expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("label length {labels} does not match map size {size}")]
    LabelMismatch { labels: usize, size: usize },
    #[error("fold counts differ: {0} vs {1}")]
    FoldMismatch(usize, usize),
    #[error("attention cache: {0}")]
    BadCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---- contrastive projector ----

pub const PROJECTOR_RANK: usize = 16;
pub const PROJECTOR_TAU: f64 = 0.07;

/// Low-rank linear projector W (k × d) with similarity temperature τ.
#[derive(Debug, Clone)]
pub struct Projector {
    /// Row-major (k, d).
    pub w: Tensor,
    pub tau: f64,
}

impl Projector {
    /// Entries normal(0, 1/d); zero init would make every projected row
    /// zero-norm and the loss undefined.
    pub fn init(k: usize, d: usize, tau: f64, rng: &mut impl Rng) -> Self {
        Projector {
            w: Tensor::randn(&[k, d], 1.0 / d as f64, rng),
            tau,
        }
    }

    /// Project one embedding to k dims.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        let (k, d) = (self.w.shape[0], self.w.shape[1]);
        (0..k)
            .map(|r| {
                self.w.data[r * d..(r + 1) * d]
                    .iter()
                    .zip(z)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }
}

/// Symmetric InfoNCE over pre-projected rows: normalize, scaled cosine
/// similarity matrix, and the average of row-wise and column-wise
/// cross-entropy against the diagonal.
pub fn contrastive_loss_graph(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    tau: f64,
) -> Result<NodeId, AdError> {
    let n = tape.shape(x)[0];
    let xh = tape.row_normalize(x)?;
    let yh = tape.row_normalize(y)?;
    let yt = tape.transpose(yh, 0, 1)?;
    let sims = tape.matmul(xh, yt)?;
    let s = tape.scale(sims, 1.0 / tau)?;
    let labels: Vec<i64> = (0..n as i64).collect();
    let row_ce = tape.cross_entropy(s, &labels, -1)?;
    let st = tape.transpose(s, 0, 1)?;
    let col_ce = tape.cross_entropy(st, &labels, -1)?;
    let sum = tape.add(row_ce, col_ce)?;
    tape.scale(sum, 0.5)
}

/// Dense evaluation of [`contrastive_loss_graph`] on (N, k) row batches.
pub fn contrastive_loss(x: &Tensor, y: &Tensor, tau: f64) -> Result<f64, ProbeError> {
    if x.shape[0] != y.shape[0] {
        return Err(ProbeError::PairCountMismatch(x.shape[0], y.shape[0]));
    }
    let mut tape = Tape::new();
    let xn = tape.constant(x);
    let yn = tape.constant(y);
    let loss = contrastive_loss_graph(&mut tape, xn, yn, tau)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone)]
pub struct ProjectorConfig {
    pub k: usize,
    pub tau: f64,
    pub steps: usize,
    pub lr: f64,
    /// Fraction of pairs used for training; the rest are held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            k: PROJECTOR_RANK,
            tau: PROJECTOR_TAU,
            steps: 10_000,
            lr: 0.01,
            train_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct ProjectorFit {
    pub projector: Projector,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub final_loss: f64,
}

/// Fit W over a small train split of paired frozen embeddings with AdamW,
/// learning rate decayed linearly to zero. `zx`/`zy` are (N, d) batches.
pub fn fit_projector(
    zx: &Tensor,
    zy: &Tensor,
    cfg: &ProjectorConfig,
) -> Result<ProjectorFit, ProbeError> {
    let n = zx.shape[0];
    if zy.shape[0] != n {
        return Err(ProbeError::PairCountMismatch(n, zy.shape[0]));
    }
    let d = zx.shape[1];
    let mut rng = derive(cfg.seed, "projector/split");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * cfg.train_fraction).floor() as usize;
    let (train_indices, test_indices) = order.split_at(n_train);
    if train_indices.len() < 2 {
        return Err(ProbeError::TooFewPairs(train_indices.len()));
    }
    let batch_size = train_indices.len().min(256);

    let take_rows = |src: &Tensor, rows: &[usize]| -> Tensor {
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|&r| src.data[r * d..(r + 1) * d].to_vec())
            .collect();
        Tensor::new(vec![rows.len(), d], data).unwrap()
    };

    let projector = Projector::init(cfg.k, d, cfg.tau, &mut derive(cfg.seed, "projector/init"));
    // keep W as (d, k) during training so projection is a plain matmul
    let mut wt = Tensor::zeros(&[d, cfg.k]);
    for r in 0..cfg.k {
        for c in 0..d {
            wt.data[c * cfg.k + r] = projector.w.data[r * d + c];
        }
    }
    let mut params = BTreeMap::from([("probe.w".to_string(), wt)]);
    let groups = vec![LrGroup {
        name: "projector",
        lr: cfg.lr,
        weight_decay_enabled: false,
        params: vec!["probe.w".to_string()],
    }];
    let mut state = OptimState::new(&params, groups)?;

    let mut batch_rng = derive(cfg.seed, "projector/batches");
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let rows: Vec<usize> = if batch_size == train_indices.len() {
            train_indices.to_vec()
        } else {
            (0..batch_size)
                .map(|_| train_indices[batch_rng.gen_range(0..train_indices.len())])
                .collect()
        };
        let bx = take_rows(zx, &rows);
        let by = take_rows(zy, &rows);
        let mut tape = Tape::new();
        let w_node = tape.param(&params["probe.w"]);
        let xz = tape.constant(&bx);
        let yz = tape.constant(&by);
        let px = tape.matmul(xz, w_node)?;
        let py = tape.matmul(yz, w_node)?;
        let loss = contrastive_loss_graph(&mut tape, px, py, cfg.tau)?;
        final_loss = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = BTreeMap::from([(
            "probe.w".to_string(),
            tape.grad(w_node)
                .expect("projector weight is reachable from the loss")
                .clone(),
        )]);
        let multiplier = 1.0 - step as f64 / cfg.steps as f64;
        adamw_step(&mut state, &mut params, &grads, multiplier)?;
    }

    // back to the (k, d) layout the Projector carries
    let wt = &params["probe.w"];
    let mut w = Tensor::zeros(&[cfg.k, d]);
    for r in 0..cfg.k {
        for c in 0..d {
            w.data[r * d + c] = wt.data[c * cfg.k + r];
        }
    }
    Ok(ProjectorFit {
        projector: Projector { w, tau: cfg.tau },
        train_indices: train_indices.to_vec(),
        test_indices: test_indices.to_vec(),
        final_loss,
    })
}

/// Box-plot summary: median, quartiles, whiskers at ±1.5·IQR clipped to
/// the data range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

pub fn box_stats(values: &[f64]) -> BoxStats {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        if sorted.len() == 1 {
            return sorted[0];
        }
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let (q1, median, q3) = (quantile(0.25), quantile(0.5), quantile(0.75));
    let iqr = q3 - q1;
    BoxStats {
        median,
        q1,
        q3,
        whisker_low: (q1 - 1.5 * iqr).max(sorted[0]),
        whisker_high: (q3 + 1.5 * iqr).min(*sorted.last().unwrap()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub matched: BoxStats,
    pub mismatched: BoxStats,
    pub matched_values: Vec<f64>,
    pub mismatched_values: Vec<f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine similarity distributions over held-out pairs: matched pairs
/// (i, i) against mismatched pairs (i, i+1 mod N).
pub fn probe_eval(
    projector: &Projector,
    zx: &Tensor,
    zy: &Tensor,
    indices: &[usize],
) -> Result<SimilarityStats, ProbeError> {
    if zx.shape[0] != zy.shape[0] {
        return Err(ProbeError::PairCountMismatch(zx.shape[0], zy.shape[0]));
    }
    let d = zx.shape[1];
    let row = |src: &Tensor, i: usize| projector.project(&src.data[i * d..(i + 1) * d]);
    let mut matched = Vec::with_capacity(indices.len());
    let mut mismatched = Vec::with_capacity(indices.len());
    for (pos, &i) in indices.iter().enumerate() {
        let px = row(zx, i);
        matched.push(cosine(&px, &row(zy, i)));
        let j = indices[(pos + 1) % indices.len()];
        if j != i {
            mismatched.push(cosine(&px, &row(zy, j)));
        }
    }
    Ok(SimilarityStats {
        matched: box_stats(&matched),
        mismatched: box_stats(&mismatched),
        matched_values: matched,
        mismatched_values: mismatched,
    })
}

// ---- attention-map contact probe ----

pub const ATTN_PROBE_CHANNELS: usize = 64;

/// Conv stack N² → 64 → 64 → 64 → 1 (all 3×3, padding 1), then mean over
/// the last axis and a sigmoid: per-residue contact probabilities.
#[derive(Debug, Clone)]
pub struct AttnProbe {
    /// Input channel count; N² for N layers of N heads each.
    pub in_channels: usize,
    pub params: BTreeMap<String, Tensor>,
}

impl AttnProbe {
    pub fn init(in_channels: usize, rng: &mut impl Rng) -> Self {
        let c = ATTN_PROBE_CHANNELS;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut params = BTreeMap::new();
        params.insert(
            "probe.conv1".to_string(),
            Tensor::randn(&[c, in_channels, 3, 3], he(in_channels * 9), rng),
        );
        params.insert(
            "probe.conv2".to_string(),
            Tensor::randn(&[c, c, 3, 3], he(c * 9), rng),
        );
        params.insert(
            "probe.conv3".to_string(),
            Tensor::randn(&[c, c, 3, 3], he(c * 9), rng),
        );
        params.insert(
            "probe.conv4".to_string(),
            Tensor::randn(&[1, c, 3, 3], he(c * 9), rng),
        );
        for name in ["probe.bias1", "probe.bias2", "probe.bias3"] {
            params.insert(name.to_string(), Tensor::zeros(&[c]));
        }
        params.insert("probe.bias4".to_string(), Tensor::zeros(&[1]));
        AttnProbe { in_channels, params }
    }

    /// (1, C_in, L, L) input node -> (1, L) logits.
    pub fn logits_graph(
        &self,
        tape: &mut Tape,
        input: NodeId,
        nodes: &BTreeMap<String, NodeId>,
    ) -> Result<NodeId, AdError> {
        let l = tape.shape(input)[2];
        let mut x = input;
        for layer in 1..=4usize {
            let conv = tape.conv2d(x, nodes[&format!("probe.conv{layer}")], 1)?;
            let biased = tape.add_chan_bias(conv, nodes[&format!("probe.bias{layer}")])?;
            x = if layer < 4 { tape.relu(biased)? } else { biased };
        }
        let map = tape.reshape(x, &[l, l])?;
        let means = tape.mean_last_axis(map)?;
        tape.reshape(means, &[1, l])
    }

    /// Per-residue contact probabilities for one (C_in, L, L) tensor.
    pub fn predict(&self, attn: &Tensor) -> Result<Vec<f64>, ProbeError> {
        check_attn_shape(self.in_channels, attn)?;
        let l = attn.shape[1];
        let mut tape = Tape::new();
        let batched = Tensor::new(vec![1, self.in_channels, l, l], attn.data.clone()).unwrap();
        let input = tape.constant(&batched);
        let nodes: BTreeMap<String, NodeId> = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect();
        let logits = self.logits_graph(&mut tape, input, &nodes)?;
        let probs = tape.sigmoid(logits)?;
        Ok(tape.value(probs).data.clone())
    }
}

fn check_attn_shape(expected: usize, attn: &Tensor) -> Result<(), ProbeError> {
    if attn.rank() != 3 || attn.shape[1] != attn.shape[2] {
        return Err(ProbeError::BadCache(format!(
            "attention tensor must be (C, L, L), got {:?}",
            attn.shape
        )));
    }
    if attn.shape[0] != expected {
        return Err(ProbeError::ChannelMismatch {
            expected,
            got: attn.shape[0],
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AttnProbeConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AttnProbeConfig {
    fn default() -> Self {
        AttnProbeConfig {
            steps: 1000,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One frozen-backbone training example: a stacked (N², L, L) attention
/// tensor and per-residue contact labels of length L.
#[derive(Debug, Clone)]
pub struct AttnExample {
    pub attn: Tensor,
    pub labels: Vec<f64>,
}

/// Train the conv probe with BCE on per-residue labels; the attention
/// tensors are constants, so no gradient can reach the backbone.
pub fn attn_probe_fit(
    examples: &[AttnExample],
    cfg: &AttnProbeConfig,
) -> Result<AttnProbe, ProbeError> {
    let first = examples.first().ok_or(ProbeError::TooFewPairs(0))?;
    let in_channels = first.attn.shape[0];
    for ex in examples {
        check_attn_shape(in_channels, &ex.attn)?;
        if ex.labels.len() != ex.attn.shape[1] {
            return Err(ProbeError::LabelMismatch {
                labels: ex.labels.len(),
                size: ex.attn.shape[1],
            });
        }
    }

    let probe = AttnProbe::init(in_channels, &mut derive(cfg.seed, "attn-probe/init"));
    let mut params = probe.params.clone();
    let groups = vec![LrGroup {
        name: "attn-probe",
        lr: cfg.lr,
        weight_decay_enabled: false,
        params: params.keys().cloned().collect(),
    }];
    let mut state = OptimState::new(&params, groups)?;
    let batch = cfg.batch.min(examples.len());
    let mut rng = derive(cfg.seed, "attn-probe/batches");

    for step in 0..cfg.steps {
        let picks: Vec<usize> = if batch == examples.len() {
            (0..examples.len()).collect()
        } else {
            (0..batch).map(|_| rng.gen_range(0..examples.len())).collect()
        };
        let mut tape = Tape::new();
        let nodes: BTreeMap<String, NodeId> = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect();
        let mut total: Option<NodeId> = None;
        for &pick in &picks {
            let ex = &examples[pick];
            let l = ex.attn.shape[1];
            let batched =
                Tensor::new(vec![1, in_channels, l, l], ex.attn.data.clone()).unwrap();
            let input = tape.constant(&batched);
            let logits = probe.logits_graph(&mut tape, input, &nodes)?;
            let mask = vec![true; l];
            let loss = tape.bce_with_logits(logits, &ex.labels, &mask)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let sum = total.expect("picks is non-empty");
        let mean = tape.scale(sum, 1.0 / picks.len() as f64)?;
        tape.backward(mean)?;
        let grads: BTreeMap<String, Tensor> = nodes
            .iter()
            .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.clone())))
            .collect();
        let multiplier = 1.0 - step as f64 / cfg.steps as f64;
        adamw_step(&mut state, &mut params, &grads, multiplier)?;
    }
    Ok(AttnProbe { in_channels, params })
}

/// F1 of a probe over a set of examples at a 0.5 threshold.
pub fn attn_probe_f1(probe: &AttnProbe, examples: &[AttnExample]) -> Result<f64, ProbeError> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for ex in examples {
        for p in probe.predict(&ex.attn)? {
            preds.push(if p > 0.5 { 1.0 } else { 0.0 });
        }
        labels.extend_from_slice(&ex.labels);
    }
    Ok(crate::evals::f1(&preds, &labels)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldDelta {
    pub fold: usize,
    pub f1_base: f64,
    pub f1_ft: f64,
    pub delta_f1: f64,
}

/// Per-fold F1 comparison of two probes, each evaluated on maps from its
/// own backbone. Folds must line up one-to-one.
pub fn attn_probe_compare(
    probe_ft: &AttnProbe,
    probe_base: &AttnProbe,
    folds_ft: &[Vec<AttnExample>],
    folds_base: &[Vec<AttnExample>],
) -> Result<Vec<FoldDelta>, ProbeError> {
    if folds_ft.len() != folds_base.len() {
        return Err(ProbeError::FoldMismatch(folds_ft.len(), folds_base.len()));
    }
    folds_ft
        .iter()
        .zip(folds_base)
        .enumerate()
        .map(|(fold, (ft, base))| {
            let f1_ft = attn_probe_f1(probe_ft, ft)?;
            let f1_base = attn_probe_f1(probe_base, base)?;
            Ok(FoldDelta {
                fold,
                f1_base,
                f1_ft,
                delta_f1: f1_ft - f1_base,
            })
        })
        .collect()
}

// ---- attention tensor cache ----

const CACHE_MAGIC: &str = "polyomic-attn-cache v1";
const CACHE_DATA: &str = "attn.bin";
const CACHE_INDEX: &str = "attn.index.json";

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    offset: u64,
    shape: Vec<usize>,
}

/// Write attention tensors into `dir` as one binary blob plus a JSON
/// index mapping example id to (offset, shape).
pub fn write_attn_cache(dir: &Path, entries: &[(String, Tensor)]) -> Result<(), ProbeError> {
    let mut blob: Vec<u8> = Vec::new();
    blob.extend_from_slice(CACHE_MAGIC.as_bytes());
    blob.push(b'\n');
    let mut index: BTreeMap<String, CacheEntry> = BTreeMap::new();
    for (id, tensor) in entries {
        index.insert(
            id.clone(),
            CacheEntry {
                offset: blob.len() as u64,
                shape: tensor.shape.clone(),
            },
        );
        for v in &tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(dir.join(CACHE_DATA))?.write_all(&blob)?;
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(dir.join(CACHE_INDEX), json)?;
    Ok(())
}

/// Load one cached tensor by example id.
pub fn read_attn_cache(dir: &Path, id: &str) -> Result<Tensor, ProbeError> {
    let index: BTreeMap<String, CacheEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.join(CACHE_INDEX))?)
            .map_err(|e| ProbeError::BadCache(format!("bad index: {e}")))?;
    let entry = index
        .get(id)
        .ok_or_else(|| ProbeError::BadCache(format!("id '{id}' not in index")))?;
    let blob = std::fs::read(dir.join(CACHE_DATA))?;
    if !blob.starts_with(CACHE_MAGIC.as_bytes()) {
        return Err(ProbeError::BadCache("missing magic".to_string()));
    }
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + n * 8;
    if end > blob.len() {
        return Err(ProbeError::BadCache("truncated data".to_string()));
    }
    let data: Vec<f64> = blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| ProbeError::BadCache(e.to_string()))
}
