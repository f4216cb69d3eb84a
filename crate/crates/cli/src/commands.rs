//! Command implementations. Each command reads its inputs, computes its
//! artifacts entirely in memory, then emits artifacts plus a manifest in
//! one pass — inputs are never modified.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use polyomic::autodiff::{NodeId, Tape, Tensor};
use polyomic::evals::{compute_metric, mutation_scan, reports_to_jsonl, scan_to_tsv, MetricKind};
use polyomic::heads::{
    cls_linear, dg_predict, pairwise_graph, protein_mask, separation_mask, token_linear,
    LinearHead, PairwiseContactHead,
};
use polyomic::model::{
    build_graph, load_checkpoint, load_tensors, save_checkpoint, save_tensors, Model,
};
use polyomic::optim::{
    adamw_step, mup_lr_table, onecycle, train_loop, LrSpec, OptimState, ScheduleSpec,
    TrainConfig,
};
use polyomic::probes::{
    attn_probe_compare, attn_probe_f1, attn_probe_fit, fit_projector, probe_eval, AttnExample,
    AttnProbeConfig, ProjectorConfig,
};
use polyomic::rng::derive;
use polyomic::seqdata::{
    parse_binding_tsv, parse_fasta, parse_jaspar, pfm_consensus, BindingPair, Modality,
    SeqRecord,
};
use polyomic::splits::{build_folds, leakage_fraction};
use polyomic::tokenizer::{
    encode, encode_pair, train_bpe, TokenClass, TokenKind, TokenSeq, Vocab, CLS,
};

use crate::config::*;
use crate::manifest;

fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read input {path:?}"))
}

fn load_vocab(path: &Option<PathBuf>) -> anyhow::Result<(Vocab, Vec<(PathBuf, Vec<u8>)>)> {
    match path {
        None => Ok((Vocab::per_character(), Vec::new())),
        Some(p) => {
            let bytes = read_input(p)?;
            let text = String::from_utf8(bytes.clone())
                .with_context(|| format!("{p:?} is not UTF-8"))?;
            let vocab = Vocab::from_text(&text)?;
            Ok((vocab, vec![(p.clone(), bytes)]))
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<(Model, Vec<u8>)> {
    let bytes = read_input(path)?;
    let model = load_checkpoint(&bytes)?;
    Ok((model, bytes))
}

fn input_refs<'a>(inputs: &'a [(PathBuf, Vec<u8>)]) -> Vec<(&'a Path, &'a [u8])> {
    inputs
        .iter()
        .map(|(p, b)| (p.as_path(), b.as_slice()))
        .collect()
}

// ---- tokenizer-train ----

pub fn tokenizer_train(cfg: &TokenizerTrainConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let corpus_bytes = read_input(&cfg.corpus_fasta)?;
    let parsed = parse_fasta(std::str::from_utf8(&corpus_bytes)?);
    if !parsed.rejected.is_empty() {
        bail!(
            "corpus has {} malformed records (first: {})",
            parsed.rejected.len(),
            parsed.rejected[0]
        );
    }
    let protein = train_bpe(&parsed.records, TokenClass::Protein, cfg.target_vocab, cfg.seed)?;
    let nucleic = train_bpe(&parsed.records, TokenClass::Nucleic, cfg.target_vocab, cfg.seed)?;
    let vocab = Vocab::new(protein, nucleic)?;
    let inputs = vec![(cfg.corpus_fasta.clone(), corpus_bytes)];
    manifest::emit(
        &cfg.out_dir,
        "tokenizer-train",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[("vocab.txt".to_string(), vocab.to_text().into_bytes())],
    )
}

// ---- pretrain ----

pub fn pretrain(cfg: &PretrainConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let corpus_bytes = read_input(&cfg.corpus_fasta)?;
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let parsed = parse_fasta(std::str::from_utf8(&corpus_bytes)?);
    let corpus: Vec<Vec<u32>> = parsed
        .records
        .iter()
        .map(|r| encode(r, &vocab).map(|t| t.ids))
        .collect::<Result<_, _>>()?;
    inputs.push((cfg.corpus_fasta.clone(), corpus_bytes));

    let config = polyomic::model::ModelConfig::from_width(cfg.width, vocab.size(), cfg.max_len)?;
    let mut model = Model::init(config.clone(), &mut derive(cfg.seed, "pretrain/init"));
    let names: Vec<String> = model.params.keys().cloned().collect();
    let groups = mup_lr_table(&config, &names, LrSpec::pretrain())?;
    let schedule = ScheduleSpec::new(
        cfg.schedule.start_end_scale,
        cfg.schedule.warmup_tokens,
        cfg.schedule.total_tokens,
    )?;
    let train_cfg = TrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        schedule,
        seed: cfg.seed,
    };
    let result = train_loop(&mut model, &corpus, &vocab, groups, &train_cfg)?;
    if result.halted_on_nan {
        eprintln!("warning: training halted on non-finite loss; checkpoint is the last good state");
    }
    manifest::emit(
        &cfg.out_dir,
        "pretrain",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[
            ("checkpoint.bin".to_string(), result.checkpoint),
            (
                "trace.csv".to_string(),
                polyomic::optim::trace_to_csv(&result.trace).into_bytes(),
            ),
        ],
    )
}

// ---- shared fine-tune machinery ----

/// One full-batch AdamW step per iteration over a caller-built loss.
fn train_params<F>(
    params: &mut BTreeMap<String, Tensor>,
    state: &mut OptimState,
    steps: u64,
    schedule: Option<&ScheduleSpec>,
    tokens_per_step: u64,
    mut build_loss: F,
) -> anyhow::Result<()>
where
    F: FnMut(&mut Tape, &BTreeMap<String, NodeId>) -> anyhow::Result<NodeId>,
{
    for step in 0..steps {
        let mut tape = Tape::new();
        let nodes: BTreeMap<String, NodeId> = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect();
        let loss = build_loss(&mut tape, &nodes)?;
        tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = nodes
            .iter()
            .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.clone())))
            .collect();
        let multiplier = match schedule {
            Some(spec) => onecycle(step * tokens_per_step, spec).multiplier,
            None => 1.0,
        };
        adamw_step(state, params, &grads, multiplier)?;
    }
    Ok(())
}

/// Split a joint parameter map back into encoder and head tensors.
fn split_params(
    params: BTreeMap<String, Tensor>,
) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut encoder = BTreeMap::new();
    let mut head = BTreeMap::new();
    for (name, tensor) in params {
        if name.starts_with("head.") {
            head.insert(name, tensor);
        } else {
            encoder.insert(name, tensor);
        }
    }
    (encoder, head)
}

fn finetune_state(
    model: &Model,
    head_params: &BTreeMap<String, Tensor>,
    head_lr: f64,
    embedding_lr: f64,
    matrix_lr_numerator: f64,
) -> anyhow::Result<(BTreeMap<String, Tensor>, OptimState)> {
    let mut params = model.params.clone();
    params.extend(head_params.clone());
    let names: Vec<String> = params.keys().cloned().collect();
    let spec = LrSpec {
        embedding_lr,
        matrix_lr_numerator,
        head_lr: Some(head_lr),
    };
    let groups = mup_lr_table(&model.config, &names, spec)?;
    let state = OptimState::new(&params, groups)?;
    Ok((params, state))
}

// ---- finetune-dg ----

pub fn finetune_dg(cfg: &FinetuneDgConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let (mut model, checkpoint_bytes) = load_model(&cfg.checkpoint)?;
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let pairs_bytes = read_input(&cfg.pairs_tsv)?;
    let pairs = parse_binding_tsv(std::str::from_utf8(&pairs_bytes)?)?;
    inputs.push((cfg.checkpoint.clone(), checkpoint_bytes));
    inputs.push((cfg.pairs_tsv.clone(), pairs_bytes));

    let mut examples: Vec<(TokenSeq, f64)> = Vec::new();
    for pair in &pairs {
        if let Some(dg) = pair.dg {
            examples.push((encode_pair(pair, &vocab, model.config.max_len)?, dg));
        }
    }
    if examples.is_empty() {
        bail!("no labeled pairs in {:?}", cfg.pairs_tsv);
    }

    let head = LinearHead::init(model.config.width, 1, &mut derive(cfg.seed, "dg/head"));
    let (mut params, mut state) = finetune_state(
        &model,
        &head.params,
        cfg.head_lr,
        cfg.embedding_lr,
        cfg.matrix_lr_numerator,
    )?;
    let model_config = model.config.clone();
    train_params(&mut params, &mut state, cfg.steps, None, 0, |tape, nodes| {
        let mut total: Option<NodeId> = None;
        for (tokens, dg) in &examples {
            let positions: Vec<usize> = (0..tokens.ids.len()).collect();
            let (hidden, _, _) =
                build_graph(tape, &model_config, nodes, &[tokens.ids.clone()], &positions)?;
            let out = cls_linear(tape, hidden, nodes)?;
            let target = Tensor::new(vec![1, 1], vec![*dg])?;
            let loss = tape.mse(out, &target)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        Ok(tape.scale(total.expect("examples is non-empty"), 1.0 / examples.len() as f64)?)
    })?;

    let (encoder, head_params) = split_params(params);
    model.params = encoder;
    let head = LinearHead { params: head_params };
    let mut predictions = String::from("pair\tdg_true\tdg_pred\n");
    for (idx, pair) in pairs.iter().enumerate() {
        let pred = dg_predict(&model, &head, pair, &vocab)?;
        let dg = pair.dg.map(|v| v.to_string()).unwrap_or_default();
        predictions.push_str(&format!("{idx}\t{dg}\t{pred}\n"));
    }
    manifest::emit(
        &cfg.out_dir,
        "finetune-dg",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[
            ("checkpoint.bin".to_string(), save_checkpoint(&model)),
            ("head.bin".to_string(), save_tensors(&head.params)),
            ("predictions.tsv".to_string(), predictions.into_bytes()),
        ],
    )
}

// ---- finetune-contact ----

/// Parse `index<TAB>bitstring` contact rows.
fn parse_bit_rows(text: &str, path: &Path) -> anyhow::Result<BTreeMap<String, Vec<f64>>> {
    let mut rows = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, bits) = line
            .split_once('\t')
            .with_context(|| format!("{path:?} line {}: expected two columns", line_no + 1))?;
        let values: Vec<f64> = bits
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0.0),
                '1' => Ok(1.0),
                other => bail!("{path:?} line {}: bad bit '{other}'", line_no + 1),
            })
            .collect::<anyhow::Result<_>>()?;
        rows.insert(key.to_string(), values);
    }
    Ok(rows)
}

pub fn finetune_contact(cfg: &FinetuneContactConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let (mut model, checkpoint_bytes) = load_model(&cfg.checkpoint)?;
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let pairs_bytes = read_input(&cfg.pairs_tsv)?;
    let contacts_bytes = read_input(&cfg.contacts_tsv)?;
    let pairs = parse_binding_tsv(std::str::from_utf8(&pairs_bytes)?)?;
    let contact_rows = parse_bit_rows(std::str::from_utf8(&contacts_bytes)?, &cfg.contacts_tsv)?;
    inputs.push((cfg.checkpoint.clone(), checkpoint_bytes));
    inputs.push((cfg.pairs_tsv.clone(), pairs_bytes));
    inputs.push((cfg.contacts_tsv.clone(), contacts_bytes));

    // token-space targets: a protein token is a contact iff any residue it
    // covers is labeled (ANY rule); non-protein tokens are masked out
    struct ContactExample {
        tokens: TokenSeq,
        targets: Vec<f64>,
        mask: Vec<bool>,
    }
    let mut examples = Vec::new();
    for (idx, pair) in pairs.iter().enumerate() {
        let Some(residue_bits) = contact_rows.get(&idx.to_string()) else {
            continue;
        };
        if residue_bits.len() != pair.protein.len() {
            bail!(
                "contact row {idx} has {} bits for a {}-residue protein",
                residue_bits.len(),
                pair.protein.len()
            );
        }
        let tokens = encode_pair(pair, &vocab, model.config.max_len)?;
        let mask = protein_mask(&tokens.kinds);
        let targets: Vec<f64> = tokens
            .kinds
            .iter()
            .zip(&tokens.residue_spans)
            .map(|(kind, &(start, end))| {
                if *kind == TokenKind::Protein
                    && residue_bits[start..end].iter().any(|&b| b > 0.5)
                {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        examples.push(ContactExample { tokens, targets, mask });
    }
    if examples.is_empty() {
        bail!("no pairs with contact labels");
    }

    let head = LinearHead::init(model.config.width, 1, &mut derive(cfg.seed, "contact/head"));
    let (mut params, mut state) = finetune_state(
        &model,
        &head.params,
        cfg.head_lr,
        cfg.embedding_lr,
        cfg.matrix_lr_numerator,
    )?;
    let model_config = model.config.clone();
    train_params(&mut params, &mut state, cfg.steps, None, 0, |tape, nodes| {
        let mut total: Option<NodeId> = None;
        for ex in &examples {
            let positions: Vec<usize> = (0..ex.tokens.ids.len()).collect();
            let (hidden, _, _) =
                build_graph(tape, &model_config, nodes, &[ex.tokens.ids.clone()], &positions)?;
            let logits = token_linear(tape, hidden, nodes)?;
            let loss = tape.bce_with_logits(logits, &ex.targets, &ex.mask)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        Ok(tape.scale(total.expect("examples is non-empty"), 1.0 / examples.len() as f64)?)
    })?;

    let (encoder, head_params) = split_params(params);
    model.params = encoder;
    let head = LinearHead { params: head_params };
    let mut predictions = String::from("pair\tper_token_contact_prob\n");
    for (idx, pair) in pairs.iter().enumerate() {
        if !contact_rows.contains_key(&idx.to_string()) {
            continue;
        }
        let probs = polyomic::heads::contact_predict(&model, &head, pair, &vocab)?;
        let joined: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
        predictions.push_str(&format!("{idx}\t{}\n", joined.join(",")));
    }
    manifest::emit(
        &cfg.out_dir,
        "finetune-contact",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[
            ("checkpoint.bin".to_string(), save_checkpoint(&model)),
            ("head.bin".to_string(), save_tensors(&head.params)),
            ("predictions.tsv".to_string(), predictions.into_bytes()),
        ],
    )
}

// ---- finetune-classify ----

pub fn finetune_classify(
    cfg: &FinetuneClassifyConfig,
    config_bytes: &[u8],
) -> anyhow::Result<()> {
    if cfg.n_classes < 2 {
        bail!("n_classes must be at least 2, got {}", cfg.n_classes);
    }
    let (mut model, checkpoint_bytes) = load_model(&cfg.checkpoint)?;
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let corpus_bytes = read_input(&cfg.corpus_fasta)?;
    let labels_bytes = read_input(&cfg.labels_tsv)?;
    let parsed = parse_fasta(std::str::from_utf8(&corpus_bytes)?);
    inputs.push((cfg.checkpoint.clone(), checkpoint_bytes));
    inputs.push((cfg.corpus_fasta.clone(), corpus_bytes));
    inputs.push((cfg.labels_tsv.clone(), labels_bytes.clone()));

    let mut labels: BTreeMap<String, i64> = BTreeMap::new();
    for (line_no, line) in std::str::from_utf8(&labels_bytes)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, class) = line
            .split_once('\t')
            .with_context(|| format!("labels line {}: expected two columns", line_no + 1))?;
        let class: i64 = class
            .trim()
            .parse()
            .with_context(|| format!("labels line {}: bad class", line_no + 1))?;
        if class < 0 || class >= cfg.n_classes as i64 {
            bail!(
                "labels line {}: class {class} outside 0..{}",
                line_no + 1,
                cfg.n_classes
            );
        }
        labels.insert(id.to_string(), class);
    }

    let mut examples: Vec<(String, Vec<u32>, i64)> = Vec::new();
    for record in &parsed.records {
        if let Some(&class) = labels.get(&record.id) {
            let mut ids = vec![CLS];
            ids.extend(encode(record, &vocab)?.ids);
            examples.push((record.id.clone(), ids, class));
        }
    }
    if examples.is_empty() {
        bail!("no records with class labels");
    }

    let head = LinearHead::init(
        model.config.width,
        cfg.n_classes,
        &mut derive(cfg.seed, "classify/head"),
    );
    let (mut params, mut state) = finetune_state(
        &model,
        &head.params,
        cfg.head_lr,
        cfg.embedding_lr,
        cfg.matrix_lr_numerator,
    )?;
    let model_config = model.config.clone();
    train_params(&mut params, &mut state, cfg.steps, None, 0, |tape, nodes| {
        let mut total: Option<NodeId> = None;
        for (_, ids, class) in &examples {
            let positions: Vec<usize> = (0..ids.len()).collect();
            let (hidden, _, _) =
                build_graph(tape, &model_config, nodes, &[ids.clone()], &positions)?;
            let logits = cls_linear(tape, hidden, nodes)?;
            let loss = tape.cross_entropy(logits, &[*class], -1)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        Ok(tape.scale(total.expect("examples is non-empty"), 1.0 / examples.len() as f64)?)
    })?;

    let (encoder, head_params) = split_params(params);
    model.params = encoder;
    let head = LinearHead { params: head_params };
    let mut predictions = String::from("id\tclass_true\tclass_pred\tprobs\n");
    for (id, ids, class) in &examples {
        let probs = polyomic::heads::classify(&model, &head, ids)?;
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let joined: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
        predictions.push_str(&format!("{id}\t{class}\t{argmax}\t{}\n", joined.join(",")));
    }
    manifest::emit(
        &cfg.out_dir,
        "finetune-classify",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[
            ("checkpoint.bin".to_string(), save_checkpoint(&model)),
            ("head.bin".to_string(), save_tensors(&head.params)),
            ("predictions.tsv".to_string(), predictions.into_bytes()),
        ],
    )
}

// ---- finetune-pairwise-contact ----

pub fn finetune_pairwise_contact(
    cfg: &FinetunePairwiseContactConfig,
    config_bytes: &[u8],
) -> anyhow::Result<()> {
    let (mut model, checkpoint_bytes) = load_model(&cfg.checkpoint)?;
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let corpus_bytes = read_input(&cfg.corpus_fasta)?;
    let maps_bytes = read_input(&cfg.maps_tsv)?;
    let parsed = parse_fasta(std::str::from_utf8(&corpus_bytes)?);
    let map_rows = parse_bit_rows(std::str::from_utf8(&maps_bytes)?, &cfg.maps_tsv)?;
    inputs.push((cfg.checkpoint.clone(), checkpoint_bytes));
    inputs.push((cfg.corpus_fasta.clone(), corpus_bytes));
    inputs.push((cfg.maps_tsv.clone(), maps_bytes));

    struct MapExample {
        id: String,
        ids: Vec<u32>,
        l: usize,
        targets: Vec<f64>,
        mask: Vec<bool>,
    }
    let mut examples = Vec::new();
    for record in &parsed.records {
        let Some(bits) = map_rows.get(&record.id) else {
            continue;
        };
        let tokens = encode(record, &vocab)?;
        let l = tokens.ids.len();
        if bits.len() != l * l {
            bail!(
                "map for '{}' has {} bits, expected {l}x{l}",
                record.id,
                bits.len()
            );
        }
        examples.push(MapExample {
            id: record.id.clone(),
            ids: tokens.ids,
            l,
            targets: bits.clone(),
            mask: separation_mask(l, cfg.min_separation),
        });
    }
    if examples.is_empty() {
        bail!("no records with contact maps");
    }

    let head = PairwiseContactHead::init(
        model.config.width,
        &mut derive(cfg.seed, "pairwise/head"),
    );
    let (mut params, mut state) = finetune_state(
        &model,
        &head.params,
        cfg.head_lr,
        cfg.embedding_lr,
        cfg.matrix_lr_numerator,
    )?;
    let model_config = model.config.clone();
    let width = model.config.width;
    train_params(&mut params, &mut state, cfg.steps, None, 0, |tape, nodes| {
        let mut total: Option<NodeId> = None;
        for ex in &examples {
            let positions: Vec<usize> = (0..ex.ids.len()).collect();
            let (hidden, _, _) =
                build_graph(tape, &model_config, nodes, &[ex.ids.clone()], &positions)?;
            let features = tape.reshape(hidden, &[ex.l, width])?;
            let logits = pairwise_graph(tape, features, nodes)?;
            let loss = tape.bce_with_logits(logits, &ex.targets, &ex.mask)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        Ok(tape.scale(total.expect("examples is non-empty"), 1.0 / examples.len() as f64)?)
    })?;

    let (encoder, head_params) = split_params(params);
    model.params = encoder;
    let head = PairwiseContactHead { params: head_params };
    let mut predictions = String::from("id\trow_major_contact_prob\n");
    for ex in &examples {
        let rec = parsed
            .records
            .iter()
            .find(|r| r.id == ex.id)
            .expect("record exists");
        let (_, probs) = polyomic::heads::pairwise_contact_map(&model, &head, rec, &vocab)?;
        let joined: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
        predictions.push_str(&format!("{}\t{}\n", ex.id, joined.join(",")));
    }
    manifest::emit(
        &cfg.out_dir,
        "finetune-pairwise-contact",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[
            ("checkpoint.bin".to_string(), save_checkpoint(&model)),
            ("head.bin".to_string(), save_tensors(&head.params)),
            ("predictions.tsv".to_string(), predictions.into_bytes()),
        ],
    )
}

// ---- probe-joint ----

/// First-token hidden state of a single sequence under the frozen model.
fn cls_embedding(model: &Model, ids: Vec<u32>) -> anyhow::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let graph = model.forward_on_tape(&mut tape, &[ids], None)?;
    let hidden = tape.value(graph.hidden);
    Ok(hidden.data[..model.config.width].to_vec())
}

pub fn probe_joint(cfg: &ProbeJointConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let (model, checkpoint_bytes) = load_model(&cfg.checkpoint)?;
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let pairs_bytes = read_input(&cfg.pairs_tsv)?;
    let pairs = parse_binding_tsv(std::str::from_utf8(&pairs_bytes)?)?;
    inputs.push((cfg.checkpoint.clone(), checkpoint_bytes));
    inputs.push((cfg.pairs_tsv.clone(), pairs_bytes));

    let d = model.config.width;
    let mut zx = Vec::with_capacity(pairs.len() * d);
    let mut zy = Vec::with_capacity(pairs.len() * d);
    for pair in &pairs {
        let mut prot_ids = vec![CLS];
        prot_ids.extend(encode(&pair.protein, &vocab)?.ids);
        zx.extend(cls_embedding(&model, prot_ids)?);
        let mut na_ids = vec![CLS];
        na_ids.extend(encode(&pair.na1, &vocab)?.ids);
        if let Some(na2) = &pair.na2 {
            na_ids.extend(encode(na2, &vocab)?.ids);
        }
        zy.extend(cls_embedding(&model, na_ids)?);
    }
    let zx = Tensor::new(vec![pairs.len(), d], zx)?;
    let zy = Tensor::new(vec![pairs.len(), d], zy)?;

    let projector_cfg = ProjectorConfig {
        k: cfg.k,
        tau: cfg.tau,
        steps: cfg.steps,
        lr: cfg.lr,
        train_fraction: cfg.train_fraction,
        seed: cfg.seed,
    };
    let fit = fit_projector(&zx, &zy, &projector_cfg)?;
    let stats = probe_eval(&fit.projector, &zx, &zy, &fit.test_indices)?;
    let projector_params = BTreeMap::from([("probe.w".to_string(), fit.projector.w.clone())]);
    manifest::emit(
        &cfg.out_dir,
        "probe-joint",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[
            ("projector.bin".to_string(), save_tensors(&projector_params)),
            (
                "similarity_stats.json".to_string(),
                serde_json::to_string_pretty(&stats)?.into_bytes(),
            ),
        ],
    )
}

// ---- probe-attn ----

/// Stack a frozen model's per-layer (1, H, T, T) attention maps into one
/// (N², T, T) channel tensor and pair it with per-token contact labels.
fn attn_example(
    model: &Model,
    tokens: &TokenSeq,
    residue_bits: &[f64],
) -> anyhow::Result<AttnExample> {
    let t = tokens.ids.len();
    let channels = model.config.depth * model.config.n_heads;
    let mut tape = Tape::new();
    let graph = model.forward_on_tape(&mut tape, &[tokens.ids.clone()], None)?;
    let mut data = Vec::with_capacity(channels * t * t);
    for &node in &graph.attn {
        data.extend_from_slice(&tape.value(node).data);
    }
    let attn = Tensor::new(vec![channels, t, t], data)?;
    let labels: Vec<f64> = tokens
        .kinds
        .iter()
        .zip(&tokens.residue_spans)
        .map(|(kind, &(start, end))| {
            if *kind == TokenKind::Protein && residue_bits[start..end].iter().any(|&b| b > 0.5)
            {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(AttnExample { attn, labels })
}

pub fn probe_attn(cfg: &ProbeAttnConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let (model, checkpoint_bytes) = load_model(&cfg.checkpoint)?;
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let pairs_bytes = read_input(&cfg.pairs_tsv)?;
    let contacts_bytes = read_input(&cfg.contacts_tsv)?;
    let pairs = parse_binding_tsv(std::str::from_utf8(&pairs_bytes)?)?;
    let contact_rows = parse_bit_rows(std::str::from_utf8(&contacts_bytes)?, &cfg.contacts_tsv)?;
    inputs.push((cfg.checkpoint.clone(), checkpoint_bytes));
    inputs.push((cfg.pairs_tsv.clone(), pairs_bytes));
    inputs.push((cfg.contacts_tsv.clone(), contacts_bytes));

    let baseline = match &cfg.baseline_checkpoint {
        None => None,
        Some(path) => {
            let (base_model, bytes) = load_model(path)?;
            inputs.push((path.clone(), bytes));
            Some(base_model)
        }
    };

    let mut examples = Vec::new();
    let mut base_examples = Vec::new();
    for (idx, pair) in pairs.iter().enumerate() {
        let Some(residue_bits) = contact_rows.get(&idx.to_string()) else {
            continue;
        };
        if residue_bits.len() != pair.protein.len() {
            bail!(
                "contact row {idx} has {} bits for a {}-residue protein",
                residue_bits.len(),
                pair.protein.len()
            );
        }
        let tokens = encode_pair(pair, &vocab, model.config.max_len)?;
        examples.push(attn_example(&model, &tokens, residue_bits)?);
        if let Some(base_model) = &baseline {
            let base_tokens = encode_pair(pair, &vocab, base_model.config.max_len)?;
            base_examples.push(attn_example(base_model, &base_tokens, residue_bits)?);
        }
    }
    if examples.is_empty() {
        bail!("no pairs with contact labels");
    }

    let probe_cfg = AttnProbeConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
    };
    let probe = attn_probe_fit(&examples, &probe_cfg)?;
    let f1 = attn_probe_f1(&probe, &examples)?;

    let mut artifacts = vec![
        ("probe.bin".to_string(), save_tensors(&probe.params)),
        (
            "report.json".to_string(),
            serde_json::to_string_pretty(&serde_json::json!({
                "f1": f1,
                "examples": examples.len(),
            }))?
            .into_bytes(),
        ),
    ];
    if let Some(_base_model) = baseline {
        let base_probe = attn_probe_fit(&base_examples, &probe_cfg)?;
        let chunk = examples.len().div_ceil(cfg.n_folds);
        let folds_ft: Vec<Vec<AttnExample>> =
            examples.chunks(chunk).map(|c| c.to_vec()).collect();
        let folds_base: Vec<Vec<AttnExample>> =
            base_examples.chunks(chunk).map(|c| c.to_vec()).collect();
        let rows = attn_probe_compare(&probe, &base_probe, &folds_ft, &folds_base)?;
        artifacts.push((
            "compare.json".to_string(),
            serde_json::to_string_pretty(&rows)?.into_bytes(),
        ));
    }
    manifest::emit(
        &cfg.out_dir,
        "probe-attn",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &artifacts,
    )
}

// ---- split ----

pub fn split(cfg: &SplitConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let pairs_bytes = read_input(&cfg.pairs_tsv)?;
    let pairs = parse_binding_tsv(std::str::from_utf8(&pairs_bytes)?)?;
    let assignment = build_folds(
        &pairs,
        cfg.n_folds,
        cfg.quarantine_threshold,
        &mut derive(cfg.seed, "split"),
    )?;
    // re-check the invariants at emit time
    let mut seen = std::collections::BTreeSet::new();
    for fold in &assignment.folds {
        for &group in fold {
            if !seen.insert(group) {
                bail!("fold assignment places group {group} twice");
            }
        }
    }
    for &group in &assignment.quarantined {
        if seen.contains(&group) {
            bail!("quarantined group {group} leaked into a fold");
        }
    }
    let leakage = leakage_fraction(&assignment)?;
    let mut report = serde_json::json!({
        "folds": assignment.folds.len(),
        "groups": assignment.groups.len(),
        "quarantined": assignment.quarantined.len(),
    });
    if let Some(frac) = leakage {
        report["cross_fold_leakage_fraction"] = serde_json::json!(frac);
    }
    let inputs = vec![(cfg.pairs_tsv.clone(), pairs_bytes)];
    manifest::emit(
        &cfg.out_dir,
        "split",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[
            ("folds.json".to_string(), assignment.to_json().into_bytes()),
            (
                "split_report.json".to_string(),
                serde_json::to_string_pretty(&report)?.into_bytes(),
            ),
        ],
    )
}

// ---- eval ----

pub fn eval(cfg: &EvalConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let predictions_bytes = read_input(&cfg.predictions_tsv)?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in std::str::from_utf8(&predictions_bytes)?.lines().enumerate() {
        if line.trim().is_empty() || (line_no == 0 && line.starts_with("pred")) {
            continue;
        }
        let (p, l) = line
            .split_once('\t')
            .with_context(|| format!("predictions line {}: expected two columns", line_no + 1))?;
        preds.push(p.trim().parse::<f64>().with_context(|| {
            format!("predictions line {}: bad prediction", line_no + 1)
        })?);
        labels.push(l.trim().parse::<f64>().with_context(|| {
            format!("predictions line {}: bad label", line_no + 1)
        })?);
    }
    let mut reports = Vec::new();
    for name in &cfg.metrics {
        let kind: MetricKind = serde_json::from_value(serde_json::Value::String(name.clone()))
            .with_context(|| format!("unknown metric '{name}'"))?;
        reports.push(compute_metric(kind, &preds, &labels, None)?);
    }
    let inputs = vec![(cfg.predictions_tsv.clone(), predictions_bytes)];
    manifest::emit(
        &cfg.out_dir,
        "eval",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[(
            "metrics.jsonl".to_string(),
            reports_to_jsonl(&reports).into_bytes(),
        )],
    )
}

// ---- mutscan ----

pub fn mutscan(cfg: &MutscanConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let (model, checkpoint_bytes) = load_model(&cfg.checkpoint)?;
    let head_bytes = read_input(&cfg.head)?;
    let head = LinearHead {
        params: load_tensors(&head_bytes)?,
    };
    let (vocab, mut inputs) = load_vocab(&cfg.vocab)?;
    let jaspar_bytes = read_input(&cfg.jaspar)?;
    let protein_bytes = read_input(&cfg.protein_fasta)?;
    let pfms = parse_jaspar(std::str::from_utf8(&jaspar_bytes)?)?;
    let proteins = parse_fasta(std::str::from_utf8(&protein_bytes)?);
    inputs.push((cfg.checkpoint.clone(), checkpoint_bytes));
    inputs.push((cfg.head.clone(), head_bytes));
    inputs.push((cfg.jaspar.clone(), jaspar_bytes));
    inputs.push((cfg.protein_fasta.clone(), protein_bytes));

    let mut results = Vec::new();
    for pfm in &pfms {
        let protein = proteins
            .records
            .iter()
            .find(|r| r.id == pfm.name && r.modality == Modality::Protein)
            .with_context(|| format!("no protein record for motif '{}'", pfm.name))?;
        // validate the model on the consensus once so scoring errors
        // surface as a diagnostic instead of a panic mid-scan
        let consensus = pfm_consensus(pfm);
        let score = |na: &str| -> anyhow::Result<f64> {
            let na_rec = SeqRecord::new("site", Modality::Dna, na)?;
            let pair = BindingPair::new(protein.clone(), na_rec, None, None)?;
            Ok(dg_predict(&model, &head, &pair, &vocab)?)
        };
        score(&consensus.sequence)
            .with_context(|| format!("cannot score motif '{}'", pfm.name))?;
        let mut scan = mutation_scan(
            |na| score(na).expect("mutants share the consensus length and alphabet"),
            std::slice::from_ref(pfm),
            cfg.rate,
            cfg.n_mutants,
            cfg.seed,
        )?;
        results.append(&mut scan);
    }
    manifest::emit(
        &cfg.out_dir,
        "mutscan",
        cfg.seed,
        config_bytes,
        &input_refs(&inputs),
        &[("scan.tsv".to_string(), scan_to_tsv(&results).into_bytes())],
    )
}
