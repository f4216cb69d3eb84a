//! Task heads over the encoder: ΔG regression off the first token, the
//! single-omic concatenation control, per-token contact logits, sequence
//! classification, the pairwise residual-conv contact map, and the
//! token↔residue space transforms.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AdError, NodeId, Tape, Tensor};
use crate::model::{Model, ModelError};
use crate::seqdata::SeqRecord;
use crate::tokenizer::{encode, encode_pair, TokenKind, TokenizerError, Vocab, CLS};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("encoder widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("token {0} covers no residues")]
    EmptySpan(usize),
    #[error("spans cover {covered} residues but {given} targets were given")]
    SpanCoverage { covered: usize, given: usize },
    #[error("classification needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("pairwise contact head needs at least 2 tokens, got {0}")]
    TooShort(usize),
}

/// A linear projection with bias, parameters named under "head." so the
/// μP group table can claim them.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub params: BTreeMap<String, Tensor>,
}

impl LinearHead {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let mut params = BTreeMap::new();
        params.insert("head.w".to_string(), Tensor::randn(&[d_in, d_out], 0.02, rng));
        params.insert("head.b".to_string(), Tensor::zeros(&[d_out]));
        LinearHead { params }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        let mut params = BTreeMap::new();
        params.insert("head.w".to_string(), Tensor::zeros(&[d_in, d_out]));
        params.insert("head.b".to_string(), Tensor::zeros(&[d_out]));
        LinearHead { params }
    }

    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect()
    }
}

/// (B, T, W) hidden states -> (B, d_out) readout of the first token.
pub fn cls_linear(
    tape: &mut Tape,
    hidden: NodeId,
    nodes: &BTreeMap<String, NodeId>,
) -> Result<NodeId, AdError> {
    let shape = tape.shape(hidden).to_vec();
    let (b, w) = (shape[0], shape[2]);
    let first = tape.slice(hidden, 1, 0, 1)?;
    let flat = tape.reshape(first, &[b, w])?;
    let proj = tape.matmul(flat, nodes["head.w"])?;
    tape.add_bias(proj, nodes["head.b"])
}

/// (B, T, W) hidden states -> (B, T) per-token scalars.
pub fn token_linear(
    tape: &mut Tape,
    hidden: NodeId,
    nodes: &BTreeMap<String, NodeId>,
) -> Result<NodeId, AdError> {
    let shape = tape.shape(hidden).to_vec();
    let (b, t) = (shape[0], shape[1]);
    let proj = tape.matmul(hidden, nodes["head.w"])?;
    let biased = tape.add_bias(proj, nodes["head.b"])?;
    tape.reshape(biased, &[b, t])
}

// ---- ΔG regression ----

/// First-token embedding -> linear -> scalar ΔG (kcal/mol).
pub fn dg_predict(
    model: &Model,
    head: &LinearHead,
    pair: &crate::seqdata::BindingPair,
    vocab: &Vocab,
) -> Result<f64, HeadError> {
    let tokens = encode_pair(pair, vocab, model.config.max_len)?;
    let mut tape = Tape::new();
    let graph = model.forward_on_tape(&mut tape, &[tokens.ids], None)?;
    let nodes = head.register(&mut tape);
    let out = cls_linear(&mut tape, graph.hidden, &nodes)?;
    Ok(tape.value(out).item())
}

/// Concatenation control: first-token embeddings from two single-omic
/// encoders, concatenated and projected. The two encoders must share a
/// width (the head is sized for 2·width).
pub fn dg_concat_predict(
    protein_model: &Model,
    nucleic_model: &Model,
    head: &LinearHead,
    pair: &crate::seqdata::BindingPair,
    vocab: &Vocab,
) -> Result<f64, HeadError> {
    let (wp, wn) = (protein_model.config.width, nucleic_model.config.width);
    if wp != wn {
        return Err(HeadError::WidthMismatch(wp, wn));
    }
    let prot_ids = cls_prefixed(&pair.protein, vocab)?;
    let mut na_ids = cls_prefixed(&pair.na1, vocab)?;
    if let Some(na2) = &pair.na2 {
        na_ids.extend(encode(na2, vocab)?.ids);
    }
    let mut tape = Tape::new();
    let gp = protein_model.forward_on_tape(&mut tape, &[prot_ids], None)?;
    let gn = nucleic_model.forward_on_tape(&mut tape, &[na_ids], None)?;
    let nodes = head.register(&mut tape);
    let out = dg_concat_graph(&mut tape, gp.hidden, gn.hidden, &nodes)?;
    Ok(tape.value(out).item())
}

fn cls_prefixed(seq: &SeqRecord, vocab: &Vocab) -> Result<Vec<u32>, HeadError> {
    let mut ids = vec![CLS];
    ids.extend(encode(seq, vocab)?.ids);
    Ok(ids)
}

/// Graph form of the concatenation control so training can keep both
/// encoders live (or freeze them by passing constant hidden nodes).
pub fn dg_concat_graph(
    tape: &mut Tape,
    protein_hidden: NodeId,
    nucleic_hidden: NodeId,
    nodes: &BTreeMap<String, NodeId>,
) -> Result<NodeId, AdError> {
    let take_first = |tape: &mut Tape, hidden: NodeId| -> Result<NodeId, AdError> {
        let shape = tape.shape(hidden).to_vec();
        let first = tape.slice(hidden, 1, 0, 1)?;
        tape.reshape(first, &[shape[0], shape[2]])
    };
    let hp = take_first(tape, protein_hidden)?;
    let hn = take_first(tape, nucleic_hidden)?;
    let cat = tape.concat(&[hp, hn], 1)?;
    let proj = tape.matmul(cat, nodes["head.w"])?;
    tape.add_bias(proj, nodes["head.b"])
}

// ---- per-token contact prediction ----

/// Per-protein-token contact probabilities for one encoded pair; nucleic
/// and special positions are dropped from the output.
pub fn contact_predict(
    model: &Model,
    head: &LinearHead,
    pair: &crate::seqdata::BindingPair,
    vocab: &Vocab,
) -> Result<Vec<f64>, HeadError> {
    let tokens = encode_pair(pair, vocab, model.config.max_len)?;
    let mut tape = Tape::new();
    let graph = model.forward_on_tape(&mut tape, &[tokens.ids.clone()], None)?;
    let nodes = head.register(&mut tape);
    let logits = token_linear(&mut tape, graph.hidden, &nodes)?;
    let probs = tape.sigmoid(logits)?;
    let values = tape.value(probs);
    Ok(tokens
        .kinds
        .iter()
        .zip(&values.data)
        .filter(|(k, _)| **k == TokenKind::Protein)
        .map(|(_, &p)| p)
        .collect())
}

/// Loss mask selecting protein tokens only.
pub fn protein_mask(kinds: &[TokenKind]) -> Vec<bool> {
    kinds.iter().map(|k| *k == TokenKind::Protein).collect()
}

// ---- classification ----

/// First-token embedding -> linear -> softmax over classes.
pub fn classify(
    model: &Model,
    head: &LinearHead,
    ids: &[u32],
) -> Result<Vec<f64>, HeadError> {
    let n_classes = head.params["head.b"].numel();
    if n_classes < 2 {
        return Err(HeadError::TooFewClasses(n_classes));
    }
    let mut tape = Tape::new();
    let graph = model.forward_on_tape(&mut tape, &[ids.to_vec()], None)?;
    let nodes = head.register(&mut tape);
    let logits = cls_linear(&mut tape, graph.hidden, &nodes)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(tape.value(probs).data.clone())
}

// ---- pairwise contact map ----

pub const PAIR_PROJ_DIM: usize = 128;
pub const PAIR_CONV_CHANNELS: usize = 64;
pub const PAIR_RES_BLOCKS: usize = 8;
/// Pairs closer than this along the chain are excluded from the loss.
pub const PAIR_MIN_SEPARATION: usize = 12;

/// Projection to 128-d, pairwise concatenation to a 256×L×L tensor, a
/// 1×1 conv into 64 channels, 8 two-conv residual blocks, and a 1×1 conv
/// down to one logit map.
#[derive(Debug, Clone)]
pub struct PairwiseContactHead {
    pub params: BTreeMap<String, Tensor>,
}

impl PairwiseContactHead {
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        let c = PAIR_CONV_CHANNELS;
        let mut params = BTreeMap::new();
        params.insert(
            "head.proj".to_string(),
            Tensor::randn(&[width, PAIR_PROJ_DIM], 0.02, rng),
        );
        params.insert(
            "head.conv_in".to_string(),
            Tensor::randn(&[c, 2 * PAIR_PROJ_DIM, 1, 1], 0.05, rng),
        );
        for block in 0..PAIR_RES_BLOCKS {
            params.insert(
                format!("head.block{block}.conv1"),
                Tensor::randn(&[c, c, 3, 3], 0.03, rng),
            );
            params.insert(
                format!("head.block{block}.conv2"),
                Tensor::randn(&[c, c, 3, 3], 0.03, rng),
            );
        }
        params.insert(
            "head.conv_out".to_string(),
            Tensor::randn(&[1, c, 1, 1], 0.05, rng),
        );
        PairwiseContactHead { params }
    }

    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect()
    }
}

/// (T, W) token features -> (1, 1, T, T) contact logits.
pub fn pairwise_graph(
    tape: &mut Tape,
    features: NodeId,
    nodes: &BTreeMap<String, NodeId>,
) -> Result<NodeId, AdError> {
    let projected = tape.matmul(features, nodes["head.proj"])?;
    let pairs = tape.pair_concat(projected)?;
    let mut x = tape.conv2d(pairs, nodes["head.conv_in"], 0)?;
    for block in 0..PAIR_RES_BLOCKS {
        let c1 = tape.conv2d(x, nodes[&format!("head.block{block}.conv1")], 1)?;
        let a1 = tape.relu(c1)?;
        let c2 = tape.conv2d(a1, nodes[&format!("head.block{block}.conv2")], 1)?;
        let summed = tape.add(x, c2)?;
        x = tape.relu(summed)?;
    }
    tape.conv2d(x, nodes["head.conv_out"], 0)
}

/// Row-major L×L probabilities for one protein.
pub fn pairwise_contact_map(
    model: &Model,
    head: &PairwiseContactHead,
    protein: &SeqRecord,
    vocab: &Vocab,
) -> Result<(usize, Vec<f64>), HeadError> {
    let tokens = encode(protein, vocab)?;
    let l = tokens.ids.len();
    if l < 2 {
        return Err(HeadError::TooShort(l));
    }
    let mut tape = Tape::new();
    let graph = model.forward_on_tape(&mut tape, &[tokens.ids], None)?;
    let features = tape.reshape(graph.hidden, &[l, model.config.width])?;
    let nodes = head.register(&mut tape);
    let logits = pairwise_graph(&mut tape, features, &nodes)?;
    let probs = tape.sigmoid(logits)?;
    Ok((l, tape.value(probs).data.clone()))
}

/// Mask selecting pairs at least `min_sep` apart along the chain.
pub fn separation_mask(l: usize, min_sep: usize) -> Vec<bool> {
    let mut mask = vec![false; l * l];
    for i in 0..l {
        for j in 0..l {
            if i.abs_diff(j) >= min_sep {
                mask[i * l + j] = true;
            }
        }
    }
    mask
}

// ---- token <-> residue transforms ----

/// Per-token mode of residue class labels; ties break to the lowest id.
pub fn to_token_classes(
    residue_classes: &[i64],
    spans: &[(usize, usize)],
) -> Result<Vec<i64>, HeadError> {
    spans
        .iter()
        .enumerate()
        .map(|(idx, &(start, end))| {
            if start >= end || end > residue_classes.len() {
                return Err(if start >= end {
                    HeadError::EmptySpan(idx)
                } else {
                    HeadError::SpanCoverage {
                        covered: end,
                        given: residue_classes.len(),
                    }
                });
            }
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for &c in &residue_classes[start..end] {
                *counts.entry(c).or_default() += 1;
            }
            // BTreeMap iterates in ascending class order, so on a count
            // tie the lowest class id wins
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&c, _)| c)
                .unwrap();
            Ok(best)
        })
        .collect()
}

/// Per-token mean of residue regression targets.
pub fn to_token_means(
    residue_values: &[f64],
    spans: &[(usize, usize)],
) -> Result<Vec<f64>, HeadError> {
    spans
        .iter()
        .enumerate()
        .map(|(idx, &(start, end))| {
            if start >= end || end > residue_values.len() {
                return Err(if start >= end {
                    HeadError::EmptySpan(idx)
                } else {
                    HeadError::SpanCoverage {
                        covered: end,
                        given: residue_values.len(),
                    }
                });
            }
            let slice = &residue_values[start..end];
            Ok(slice.iter().sum::<f64>() / slice.len() as f64)
        })
        .collect()
}

/// Duplicate each token prediction across the residues it covers.
pub fn to_residue_preds(token_preds: &[f64], spans: &[(usize, usize)]) -> Vec<f64> {
    let total = spans.iter().map(|&(_, e)| e).max().unwrap_or(0);
    let mut out = vec![0.0; total];
    for (&p, &(start, end)) in token_preds.iter().zip(spans) {
        for slot in &mut out[start..end] {
            *slot = p;
        }
    }
    out
}

/// Token-space contact matrix: (i, j) is a contact iff any residue in
/// token i contacts any residue in token j.
pub fn residue_contacts_to_token(
    residue_contacts: &[bool],
    n_residues: usize,
    spans: &[(usize, usize)],
) -> Vec<bool> {
    let k = spans.len();
    let mut out = vec![false; k * k];
    for (ti, &(si, ei)) in spans.iter().enumerate() {
        for (tj, &(sj, ej)) in spans.iter().enumerate() {
            'outer: for ri in si..ei {
                for rj in sj..ej {
                    if residue_contacts[ri * n_residues + rj] {
                        out[ti * k + tj] = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    out
}

/// Token-space separation mask: a token pair stays in the loss iff any
/// covered residue pair is at least `min_sep` apart.
pub fn token_separation_mask(spans: &[(usize, usize)], min_sep: usize) -> Vec<bool> {
    let k = spans.len();
    let mut out = vec![false; k * k];
    for (ti, &(si, ei)) in spans.iter().enumerate() {
        for (tj, &(sj, ej)) in spans.iter().enumerate() {
            // extreme residues give the largest separation in the pair
            let max_sep = (ei - 1).abs_diff(sj).max(si.abs_diff(ej - 1));
            if max_sep >= min_sep {
                out[ti * k + tj] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_graph, Model, ModelConfig};
    use crate::optim::{adamw_step, LrGroup, OptimState};
    use crate::rng::derive;
    use crate::seqdata::{BindingPair, Modality};
    use crate::tokenizer::SEP;

    fn vocab() -> Vocab {
        Vocab::per_character()
    }

    fn mk_pair(protein: &str, na: &str, dg: f64) -> BindingPair {
        BindingPair::new(
            SeqRecord::new("p", Modality::Protein, protein).unwrap(),
            SeqRecord::new("n", Modality::Dna, na).unwrap(),
            None,
            Some(dg),
        )
        .unwrap()
    }

    fn small_model(seed: u64) -> Model {
        let config = ModelConfig::from_width(128, vocab().size(), 64).unwrap();
        Model::init(config, &mut derive(seed, "head-model"))
    }

    fn head_groups(head: &BTreeMap<String, Tensor>, lr: f64) -> Vec<LrGroup> {
        vec![LrGroup {
            name: "heads",
            lr,
            weight_decay_enabled: false,
            params: head.keys().cloned().collect(),
        }]
    }

    /// Frozen-encoder hidden states for a batch, one (T, W) tensor each.
    fn frozen_hidden(model: &Model, batches: &[Vec<u32>]) -> Vec<Tensor> {
        batches
            .iter()
            .map(|ids| {
                let mut tape = Tape::new();
                let graph = model.forward_on_tape(&mut tape, &[ids.clone()], None).unwrap();
                tape.value(graph.hidden).clone()
            })
            .collect()
    }

    #[test]
    fn zero_dg_head_outputs_bias() {
        let model = small_model(1);
        let mut head = LinearHead::zeros(128, 1);
        head.params.get_mut("head.b").unwrap().data[0] = -7.25;
        let v = vocab();
        for na in ["ACGT", "TTTTTTTT", "GC"] {
            let pair = mk_pair("ACDEFGHIK", na, -1.0);
            let dg = dg_predict(&model, &head, &pair, &v).unwrap();
            assert!((dg - (-7.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn dg_head_fits_gc_content_signal() {
        // 64 pairs whose ΔG is linear in the GC fraction of the nucleic
        // sequence; the frozen first-token embedding carries composition,
        // so the head alone reaches near-zero train MSE
        let v = vocab();
        let model = small_model(2);
        let mut rng = derive(2, "gc");
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..64 {
            let na: String = (0..12)
                .map(|_| ['A', 'C', 'G', 'T'][rng.gen_range(0..4)])
                .collect();
            let gc = na.chars().filter(|&c| c == 'G' || c == 'C').count() as f64 / 12.0;
            let pair = mk_pair("ACDEFGHIKLMN", &na, -2.0 - 6.0 * gc);
            let tokens = encode_pair(&pair, &v, 64).unwrap();
            inputs.push(tokens.ids);
            targets.push(pair.dg.unwrap());
        }
        let hidden = frozen_hidden(&model, &inputs);
        let cls_features: Vec<f64> = hidden
            .iter()
            .flat_map(|h| h.data[..128].to_vec())
            .collect();
        let features = Tensor::new(vec![64, 128], cls_features).unwrap();
        let target = Tensor::new(vec![64, 1], targets).unwrap();

        let head = LinearHead::init(128, 1, &mut derive(2, "head"));
        let mut params = head.params.clone();
        let mut state = OptimState::new(&params, head_groups(&params, 0.05)).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let mut tape = Tape::new();
            let x = tape.constant(&features);
            let nodes: BTreeMap<String, NodeId> = params
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(t)))
                .collect();
            let proj = tape.matmul(x, nodes["head.w"]).unwrap();
            let pred = tape.add_bias(proj, nodes["head.b"]).unwrap();
            let loss = tape.mse(pred, &target).unwrap();
            last = tape.value(loss).item();
            tape.backward(loss).unwrap();
            let grads: BTreeMap<String, Tensor> = nodes
                .iter()
                .filter_map(|(n, &id)| tape.grad(id).map(|g| (n.clone(), g.clone())))
                .collect();
            adamw_step(&mut state, &mut params, &grads, 1.0).unwrap();
        }
        assert!(last < 0.05, "train MSE {last}");
    }

    #[test]
    fn concat_control_checks_width_and_reaches_both_encoders() {
        let v = vocab();
        let model_a = small_model(3);
        let model_b = small_model(4);
        let pair = mk_pair("ACDEFG", "ACGT", -1.0);

        let mut head = LinearHead::zeros(256, 1);
        head.params.get_mut("head.b").unwrap().data[0] = 1.5;
        let dg = dg_concat_predict(&model_a, &model_b, &head, &pair, &v).unwrap();
        assert!((dg - 1.5).abs() < 1e-12);

        // width mismatch is rejected before any compute
        let wide = Model::init(
            ModelConfig::from_width(256, v.size(), 64).unwrap(),
            &mut derive(5, "wide"),
        );
        let err = dg_concat_predict(&model_a, &wide, &head, &pair, &v);
        assert!(matches!(err, Err(HeadError::WidthMismatch(128, 256))));

        // gradient reaches both encoders through the concatenated readout
        let head = LinearHead::init(256, 1, &mut derive(6, "head"));
        let mut tape = Tape::new();
        let ga = model_a
            .forward_on_tape(&mut tape, &[vec![CLS, 5, 6]], None)
            .unwrap();
        let gb = model_b
            .forward_on_tape(&mut tape, &[vec![CLS, 24, 25]], None)
            .unwrap();
        let nodes = head.register(&mut tape);
        let out = dg_concat_graph(&mut tape, ga.hidden, gb.hidden, &nodes).unwrap();
        let loss = tape.mse(out, &Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        let grad_norm = |g: Option<&Tensor>| -> f64 {
            g.map(|t| t.data.iter().map(|v| v * v).sum::<f64>()).unwrap_or(0.0)
        };
        assert!(grad_norm(tape.grad(ga.param_nodes["embed"])) > 0.0);
        assert!(grad_norm(tape.grad(gb.param_nodes["embed"])) > 0.0);
    }

    #[test]
    fn contact_probabilities_cover_protein_tokens_only() {
        let v = vocab();
        let model = small_model(7);
        let head = LinearHead::init(128, 1, &mut derive(7, "head"));
        let pair = mk_pair("ACDEFGHIK", "ACGTACG", -1.0);
        let probs = contact_predict(&model, &head, &pair, &v).unwrap();
        assert_eq!(probs.len(), 9);
        assert!(probs.iter().all(|&p| 0.0 < p && p < 1.0));
    }

    #[test]
    fn contact_loss_ignores_nucleic_positions() {
        let v = vocab();
        let model = small_model(8);
        let head = LinearHead::init(128, 1, &mut derive(8, "head"));
        let pair = mk_pair("ACDE", "ACGT", -1.0);
        let tokens = encode_pair(&pair, &v, 64).unwrap();
        let mask = protein_mask(&tokens.kinds);
        let targets: Vec<f64> = tokens
            .kinds
            .iter()
            .map(|k| if *k == TokenKind::Protein { 1.0 } else { 0.0 })
            .collect();

        let loss_with_hidden = |bump_nucleic: f64| -> f64 {
            let mut tape = Tape::new();
            let graph = model
                .forward_on_tape(&mut tape, &[tokens.ids.clone()], None)
                .unwrap();
            let nodes = head.register(&mut tape);
            let logits = token_linear(&mut tape, graph.hidden, &nodes).unwrap();
            // shift nucleic logits by a constant; the masked loss must not move
            let mut shift = Tensor::zeros(&[1, tokens.ids.len()]);
            for (i, kind) in tokens.kinds.iter().enumerate() {
                if *kind == TokenKind::Nucleic {
                    shift.data[i] = bump_nucleic;
                }
            }
            let shift_node = tape.constant(&shift);
            let shifted = tape.add(logits, shift_node).unwrap();
            let loss = tape.bce_with_logits(shifted, &targets, &mask).unwrap();
            tape.value(loss).item()
        };
        let base = loss_with_hidden(0.0);
        let bumped = loss_with_hidden(10.0);
        assert!((base - bumped).abs() < 1e-12);
    }

    #[test]
    fn contact_head_learns_planted_residue_rule() {
        // contact iff residue is K or R, per-character tokens, frozen
        // encoder: the head is a logistic regression on token features
        let v = vocab();
        let model = small_model(9);
        let mut rng = derive(9, "planted");
        let alphabet: Vec<char> = crate::seqdata::PROTEIN_ALPHABET.chars().collect();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..24 {
            let protein: String = (0..10).map(|_| alphabet[rng.gen_range(0..20)]).collect();
            let pair = mk_pair(&protein, "ACGT", -1.0);
            let tokens = encode_pair(&pair, &v, 64).unwrap();
            let hidden = frozen_hidden(&model, &[tokens.ids.clone()]).remove(0);
            for (i, kind) in tokens.kinds.iter().enumerate() {
                if *kind != TokenKind::Protein {
                    continue;
                }
                features.extend_from_slice(&hidden.data[i * 128..(i + 1) * 128]);
                let (start, _) = tokens.residue_spans[i];
                let residue = protein.chars().nth(start).unwrap();
                labels.push(if residue == 'K' || residue == 'R' { 1.0 } else { 0.0 });
            }
        }
        let n = labels.len();
        let x = Tensor::new(vec![n, 128], features).unwrap();
        let mask = vec![true; n];

        let head = LinearHead::init(128, 1, &mut derive(9, "head"));
        let mut params = head.params.clone();
        let mut state = OptimState::new(&params, head_groups(&params, 0.05)).unwrap();
        for _ in 0..300 {
            let mut tape = Tape::new();
            let xc = tape.constant(&x);
            let nodes: BTreeMap<String, NodeId> = params
                .iter()
                .map(|(name, t)| (name.clone(), tape.param(t)))
                .collect();
            let proj = tape.matmul(xc, nodes["head.w"]).unwrap();
            let biased = tape.add_bias(proj, nodes["head.b"]).unwrap();
            let logits = tape.reshape(biased, &[1, n]).unwrap();
            let loss = tape.bce_with_logits(logits, &labels, &mask).unwrap();
            tape.backward(loss).unwrap();
            let grads: BTreeMap<String, Tensor> = nodes
                .iter()
                .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.clone())))
                .collect();
            adamw_step(&mut state, &mut params, &grads, 1.0).unwrap();
        }
        // score on the training set
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let mut logit = params["head.b"].data[0];
            for d in 0..128 {
                logit += x.data[i * 128 + d] * params["head.w"].data[d];
            }
            preds.push(if logit > 0.0 { 1.0 } else { 0.0 });
        }
        let f1 = crate::evals::f1(&preds, &labels).unwrap();
        assert!(f1 > 0.95, "train F1 {f1}");
    }

    #[test]
    fn classifier_distributions_are_normalized() {
        let _ = vocab();
        let model = small_model(10);
        let head = LinearHead::init(128, 3, &mut derive(10, "head"));
        let probs = classify(&model, &head, &[CLS, 5, 6, 7]).unwrap();
        assert_eq!(probs.len(), 3);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let uniform = LinearHead::zeros(128, 4);
        let probs = classify(&model, &uniform, &[CLS, 5, 6]).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let narrow = LinearHead::zeros(128, 1);
        assert!(matches!(
            classify(&model, &narrow, &[CLS, 5]),
            Err(HeadError::TooFewClasses(1))
        ));
    }

    #[test]
    fn classifier_learns_composition_classes() {
        // class 1 sequences are A-heavy, class 0 are T-heavy; the frozen
        // first-token embedding separates them linearly
        let v = vocab();
        let model = small_model(11);
        let mut rng = derive(11, "classes");
        let mut features = Vec::new();
        let mut labels: Vec<i64> = Vec::new();
        for _ in 0..64 {
            let class = rng.gen_range(0..2);
            let heavy = if class == 1 { 'A' } else { 'T' };
            let na: String = (0..12)
                .map(|_| {
                    if rng.gen::<f64>() < 0.7 {
                        heavy
                    } else {
                        ['A', 'C', 'G', 'T'][rng.gen_range(0..4)]
                    }
                })
                .collect();
            let rec = SeqRecord::new("n", Modality::Dna, &na).unwrap();
            let mut ids = vec![CLS];
            ids.extend(encode(&rec, &v).unwrap().ids);
            let hidden = frozen_hidden(&model, &[ids]).remove(0);
            features.extend_from_slice(&hidden.data[..128]);
            labels.push(class as i64);
        }
        let x = Tensor::new(vec![64, 128], features).unwrap();
        let head = LinearHead::init(128, 2, &mut derive(11, "head"));
        let mut params = head.params.clone();
        let mut state = OptimState::new(&params, head_groups(&params, 0.05)).unwrap();
        for _ in 0..300 {
            let mut tape = Tape::new();
            let xc = tape.constant(&x);
            let nodes: BTreeMap<String, NodeId> = params
                .iter()
                .map(|(name, t)| (name.clone(), tape.param(t)))
                .collect();
            let proj = tape.matmul(xc, nodes["head.w"]).unwrap();
            let logits = tape.add_bias(proj, nodes["head.b"]).unwrap();
            let loss = tape.cross_entropy(logits, &labels, -1).unwrap();
            tape.backward(loss).unwrap();
            let grads: BTreeMap<String, Tensor> = nodes
                .iter()
                .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.clone())))
                .collect();
            adamw_step(&mut state, &mut params, &grads, 1.0).unwrap();
        }
        let mut correct = 0;
        for i in 0..64 {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for c in 0..2 {
                let mut logit = params["head.b"].data[c];
                for d in 0..128 {
                    logit += x.data[i * 128 + d] * params["head.w"].data[d * 2 + c];
                }
                if logit > best.0 {
                    best = (logit, c);
                }
            }
            if best.1 as i64 == labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / 64.0;
        assert!(acc > 0.95, "train accuracy {acc}");
    }

    #[test]
    fn pairwise_map_shape_and_mask_law() {
        let v = vocab();
        let model = small_model(12);
        let head = PairwiseContactHead::init(128, &mut derive(12, "head"));
        let protein = SeqRecord::new("p", Modality::Protein, "ACDEFGHIKLMNPQRS").unwrap();
        let (l, probs) = pairwise_contact_map(&model, &head, &protein, &v).unwrap();
        assert_eq!(l, 16);
        assert_eq!(probs.len(), 256);
        assert!(probs.iter().all(|&p| 0.0 < p && p < 1.0));

        // loss is flat in logits at near-diagonal pairs
        let mask = separation_mask(l, PAIR_MIN_SEPARATION);
        let targets = vec![0.0; l * l];
        let tokens = encode(&protein, &v).unwrap();
        let loss_at = |bump: f64| -> f64 {
            let mut tape = Tape::new();
            let graph = model
                .forward_on_tape(&mut tape, &[tokens.ids.clone()], None)
                .unwrap();
            let features = tape.reshape(graph.hidden, &[l, 128]).unwrap();
            let nodes = head.register(&mut tape);
            let logits = pairwise_graph(&mut tape, features, &nodes).unwrap();
            let mut shift = Tensor::zeros(&[1, 1, l, l]);
            for i in 0..l {
                for j in 0..l {
                    if i.abs_diff(j) < PAIR_MIN_SEPARATION {
                        shift.data[i * l + j] = bump;
                    }
                }
            }
            let shift_node = tape.constant(&shift);
            let shifted = tape.add(logits, shift_node).unwrap();
            let loss = tape.bce_with_logits(shifted, &targets, &mask).unwrap();
            tape.value(loss).item()
        };
        assert!((loss_at(0.0) - loss_at(25.0)).abs() < 1e-12);

        let single = SeqRecord::new("p", Modality::Protein, "A").unwrap();
        assert!(matches!(
            pairwise_contact_map(&model, &head, &single, &v),
            Err(HeadError::TooShort(1))
        ));
    }

    #[test]
    fn pairwise_head_learns_planted_pattern() {
        // plant: contact iff both residues are K and the pair is outside
        // the near-diagonal exclusion; train on frozen features. AdamW at
        // lr >= 0.05 kills the bias-free ReLU stack (constant output, loss
        // pinned at ln 2), so the head trains at 0.005.
        let v = vocab();
        let model = small_model(13);
        let mut rng = derive(13, "planted-pairs");
        let alphabet: Vec<char> = crate::seqdata::PROTEIN_ALPHABET.chars().collect();
        let l = 16;
        let protein: String = (0..l)
            .map(|_| {
                if rng.gen::<f64>() < 0.3 {
                    'K'
                } else {
                    alphabet[rng.gen_range(0..20)]
                }
            })
            .collect();
        let tokens = encode(&SeqRecord::new("p", Modality::Protein, &protein).unwrap(), &v)
            .unwrap();
        let hidden = frozen_hidden(&model, &[tokens.ids.clone()]).remove(0);
        let features = Tensor::new(vec![l, 128], hidden.data).unwrap();
        let mask = separation_mask(l, PAIR_MIN_SEPARATION);
        let residues: Vec<char> = protein.chars().collect();
        let mut targets = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                if residues[i] == 'K' && residues[j] == 'K' {
                    targets[i * l + j] = 1.0;
                }
            }
        }

        let head = PairwiseContactHead::init(128, &mut derive(13, "head"));
        let mut params = head.params.clone();
        let mut state = OptimState::new(&params, head_groups(&params, 0.005)).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..80 {
            let mut tape = Tape::new();
            let xc = tape.constant(&features);
            let nodes: BTreeMap<String, NodeId> = params
                .iter()
                .map(|(name, t)| (name.clone(), tape.param(t)))
                .collect();
            let logits = pairwise_graph(&mut tape, xc, &nodes).unwrap();
            let loss = tape.bce_with_logits(logits, &targets, &mask).unwrap();
            last = tape.value(loss).item();
            tape.backward(loss).unwrap();
            let grads: BTreeMap<String, Tensor> = nodes
                .iter()
                .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.clone())))
                .collect();
            adamw_step(&mut state, &mut params, &grads, 1.0).unwrap();
        }
        // score the trained map
        let mut tape = Tape::new();
        let xc = tape.constant(&features);
        let nodes: BTreeMap<String, NodeId> = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect();
        let logits = pairwise_graph(&mut tape, xc, &nodes).unwrap();
        let scores = tape.value(logits).data.clone();
        assert!(last < 0.05, "final BCE {last}");
        // every pair the loss sees is classified correctly
        for (i, (&s, &t)) in scores.iter().zip(&targets).enumerate() {
            if mask[i] {
                assert_eq!(s > 0.0, t > 0.5, "pair {i} logit {s} target {t}");
            }
        }
    }

    #[test]
    fn token_residue_transforms() {
        // mode with ties to the lowest class id
        let spans = vec![(0, 3), (3, 5)];
        assert_eq!(to_token_classes(&[1, 1, 2, 1, 2], &spans).unwrap(), vec![1, 1]);
        assert_eq!(to_token_classes(&[1, 2, 2, 2, 1], &spans).unwrap(), vec![2, 1]);
        assert!(matches!(
            to_token_classes(&[1, 2], &[(0, 0)]),
            Err(HeadError::EmptySpan(0))
        ));

        assert_eq!(
            to_token_means(&[1.0, 2.0, 3.0], &[(0, 3)]).unwrap(),
            vec![2.0]
        );

        assert_eq!(
            to_residue_preds(&[0.7, 0.2], &[(0, 3), (3, 4)]),
            vec![0.7, 0.7, 0.7, 0.2]
        );

        // per-character spans make the round trip exact
        let unit_spans: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
        let values = vec![0.3, 0.9, 0.1, 0.5, 0.7];
        let tokens = to_token_means(&values, &unit_spans).unwrap();
        assert_eq!(to_residue_preds(&tokens, &unit_spans), values);
    }

    #[test]
    fn contact_map_transforms_use_any_rule() {
        // residues 0..6; tokens cover {0,1}, {2,3,4}, {5}
        let spans = vec![(0, 2), (2, 5), (5, 6)];
        let n = 6;
        let mut contacts = vec![false; n * n];
        contacts[1 * n + 5] = true;
        let token_contacts = residue_contacts_to_token(&contacts, n, &spans);
        assert!(token_contacts[0 * 3 + 2]);
        assert!(!token_contacts[1 * 3 + 2]);

        // monotone: adding a residue contact never clears a token contact
        let mut more = contacts.clone();
        more[2 * n + 5] = true;
        let bigger = residue_contacts_to_token(&more, n, &spans);
        for (a, b) in token_contacts.iter().zip(&bigger) {
            assert!(!a | b);
        }

        let mask = token_separation_mask(&spans, 4);
        // token 0 covers residue 0, token 2 covers residue 5: separation 5
        assert!(mask[0 * 3 + 2]);
        // tokens 1 and 2: farthest residues are 2 and 5, separation 3
        assert!(!mask[1 * 3 + 2]);
    }

    #[test]
    fn head_grad_checks() {
        use crate::autodiff::grad_check;
        let v = vocab();
        let config = ModelConfig::from_width(128, v.size(), 64).unwrap();
        let model = Model::init(config.clone(), &mut derive(20, "gc"));
        let head = LinearHead::init(128, 1, &mut derive(20, "gc-head"));
        let ids = vec![vec![CLS, 5, 6, SEP, 24, 25]];
        let positions: Vec<usize> = (0..6).collect();

        let mut names: Vec<String> = model.params.keys().cloned().collect();
        let mut values: Vec<Tensor> = names.iter().map(|n| model.params[n].clone()).collect();
        for (n, t) in &head.params {
            names.push(n.clone());
            values.push(t.clone());
        }
        let target = Tensor::new(vec![1, 1], vec![-3.0]).unwrap();
        let err = grad_check(
            |tape, param_ids| {
                let nodes: BTreeMap<String, NodeId> = names
                    .iter()
                    .cloned()
                    .zip(param_ids.iter().copied())
                    .collect();
                let (hidden, _, _) = build_graph(tape, &config, &nodes, &ids, &positions)
                    .map_err(|e| AdError::BadArgument {
                        op: "model",
                        reason: e.to_string(),
                    })?;
                let out = cls_linear(tape, hidden, &nodes)?;
                tape.mse(out, &target)
            },
            &values,
            1e-5,
            3,
            &mut derive(21, "gc-sample"),
        )
        .unwrap();
        assert!(err < 1e-4, "dg head grad check {err}");

        // pairwise head on frozen features, small map
        let head = PairwiseContactHead::init(128, &mut derive(22, "gc-pair"));
        let l = 14;
        let features = Tensor::randn(&[l, 128], 0.5, &mut derive(22, "gc-feat"));
        let mask = separation_mask(l, PAIR_MIN_SEPARATION);
        let targets: Vec<f64> = (0..l * l).map(|i| (i % 2) as f64).collect();
        let names: Vec<String> = head.params.keys().cloned().collect();
        let values: Vec<Tensor> = names.iter().map(|n| head.params[n].clone()).collect();
        let err = grad_check(
            |tape, param_ids| {
                let nodes: BTreeMap<String, NodeId> = names
                    .iter()
                    .cloned()
                    .zip(param_ids.iter().copied())
                    .collect();
                let xc = tape.constant(&features);
                let logits = pairwise_graph(tape, xc, &nodes)?;
                tape.bce_with_logits(logits, &targets, &mask)
            },
            &values,
            1e-5,
            2,
            &mut derive(23, "gc-pair-sample"),
        )
        .unwrap();
        assert!(err < 1e-4, "pairwise head grad check {err}");
    }
}
