//! Scalar evaluation metrics and the consensus mutation scan.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_indexed;
use crate::seqdata::{pfm_consensus, Pfm, PFM_ROW_ORDER};
use rand::Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({0}) and labels ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("metric needs at least {need} points, got {got}")]
    TooFewPoints { got: usize, need: usize },
    #[error("{0} is undefined on a constant input (zero variance)")]
    DegenerateVariance(&'static str),
    #[error("{0} requires binary labels (0 or 1)")]
    NonBinaryLabels(&'static str),
    #[error("{0} requires both a positive and a negative label")]
    OneClassOnly(&'static str),
    #[error("p_at_l needs a square score map, got {0} scores for length {1}")]
    BadScoreMap(usize, usize),
    #[error("no residue pair satisfies the {0} separation range")]
    EmptySeparationMask(&'static str),
    #[error("mutation rate {0} must be in (0, 1)")]
    BadMutationRate(f64),
    #[error("PFM '{name}' cannot yield {want} distinct mutants (length {len})")]
    TooFewMutants {
        name: String,
        len: usize,
        want: usize,
    },
    #[error("could not draw distinct mutants for '{0}' within 100 attempts")]
    MutantRedrawExhausted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Pcc,
    Spearman,
    Mae,
    Mcc,
    F1,
    Accuracy,
    Aucroc,
    PAtL,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub kind: MetricKind,
    pub value: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold_id: Option<usize>,
}

/// Range of |i - j| eligible for P@L scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeparationRange {
    /// |i - j| >= 24
    Long,
    /// 12 <= |i - j| < 24
    Medium,
}

impl SeparationRange {
    fn admits(self, sep: usize) -> bool {
        match self {
            SeparationRange::Long => sep >= 24,
            SeparationRange::Medium => (12..24).contains(&sep),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SeparationRange::Long => "long",
            SeparationRange::Medium => "medium",
        }
    }
}

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<(), EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    Ok(())
}

fn check_binary(labels: &[f64], metric: &'static str) -> Result<(), EvalError> {
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(EvalError::NonBinaryLabels(metric));
    }
    Ok(())
}

pub fn pcc(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, labels)?;
    let n = preds.len();
    if n < 2 {
        return Err(EvalError::TooFewPoints { got: n, need: 2 });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(preds), mean(labels));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let (dx, dy) = (preds[i] - mx, labels[i] - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(EvalError::DegenerateVariance("pcc"));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Ranks with ties averaged (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, labels)?;
    let rp = average_ranks(preds);
    let rl = average_ranks(labels);
    pcc(&rp, &rl).map_err(|e| match e {
        EvalError::DegenerateVariance(_) => EvalError::DegenerateVariance("spearman"),
        other => other,
    })
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, labels)?;
    if preds.is_empty() {
        return Err(EvalError::TooFewPoints { got: 0, need: 1 });
    }
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

fn confusion(preds: &[f64], labels: &[f64]) -> (f64, f64, f64, f64) {
    let mut tp = 0.0;
    let mut tn = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &l) in preds.iter().zip(labels) {
        match (p != 0.0, l != 0.0) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    (tp, tn, fp, fn_)
}

pub fn mcc(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, labels)?;
    check_binary(labels, "mcc")?;
    check_binary(preds, "mcc")?;
    let (tp, tn, fp, fn_) = confusion(preds, labels);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        return Err(EvalError::DegenerateVariance("mcc"));
    }
    Ok((tp * tn - fp * fn_) / denom)
}

pub fn f1(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, labels)?;
    check_binary(labels, "f1")?;
    check_binary(preds, "f1")?;
    let (tp, _, fp, fn_) = confusion(preds, labels);
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        return Err(EvalError::OneClassOnly("f1"));
    }
    Ok(2.0 * tp / denom)
}

pub fn accuracy(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, labels)?;
    if preds.is_empty() {
        return Err(EvalError::TooFewPoints { got: 0, need: 1 });
    }
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p != 0.0) == (**l != 0.0))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// AUCROC via the rank-sum (Mann-Whitney U) formulation; tied scores get
/// averaged ranks, which matches the trapezoidal ROC area exactly.
pub fn aucroc(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    check_binary(labels, "aucroc")?;
    let n_pos = labels.iter().filter(|&&l| l != 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::OneClassOnly("aucroc"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != 0.0)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Precision among the top-L scored residue pairs within the separation
/// range. `scores` and `contacts` are row-major L×L maps; only the upper
/// triangle is consulted.
pub fn p_at_l(
    scores: &[f64],
    contacts: &[f64],
    l: usize,
    range: SeparationRange,
) -> Result<f64, EvalError> {
    if scores.len() != l * l {
        return Err(EvalError::BadScoreMap(scores.len(), l));
    }
    if contacts.len() != scores.len() {
        return Err(EvalError::LengthMismatch(scores.len(), contacts.len()));
    }
    check_binary(contacts, "p_at_l")?;
    let mut eligible: Vec<(f64, f64)> = Vec::new();
    for i in 0..l {
        for j in (i + 1)..l {
            if range.admits(j - i) {
                eligible.push((scores[i * l + j], contacts[i * l + j]));
            }
        }
    }
    if eligible.is_empty() {
        return Err(EvalError::EmptySeparationMask(range.name()));
    }
    eligible.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let k = l.min(eligible.len());
    let hits: f64 = eligible[..k].iter().map(|(_, c)| c).sum();
    Ok(hits / k as f64)
}

/// Scalar-vector entry point used by the CLI `eval` command; P@L has its
/// own shape and goes through [`p_at_l`] directly.
pub fn compute_metric(
    kind: MetricKind,
    preds: &[f64],
    labels: &[f64],
    fold_id: Option<usize>,
) -> Result<MetricReport, EvalError> {
    let value = match kind {
        MetricKind::Pcc => pcc(preds, labels)?,
        MetricKind::Spearman => spearman(preds, labels)?,
        MetricKind::Mae => mae(preds, labels)?,
        MetricKind::Mcc => mcc(preds, labels)?,
        MetricKind::F1 => f1(preds, labels)?,
        MetricKind::Accuracy => accuracy(preds, labels)?,
        MetricKind::Aucroc => aucroc(preds, labels)?,
        MetricKind::PAtL => {
            return Err(EvalError::BadScoreMap(preds.len(), 0));
        }
    };
    Ok(MetricReport {
        kind,
        value,
        n: preds.len(),
        fold_id,
    })
}

// ---- mutation scan ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutationScanResult {
    pub dbp: String,
    pub consensus: String,
    pub mutants: Vec<String>,
    pub dg_consensus: f64,
    pub dg_mutants: Vec<f64>,
    /// mean(dg_mutants) - dg_consensus
    pub ddg_mean: f64,
    /// Individual ΔΔG values, for pooled aggregation.
    pub ddg_each: Vec<f64>,
}

/// Resample each position with probability `rate` to a uniformly random
/// *different* base; all-unchanged draws are rejected and redrawn.
pub fn mutate_consensus(consensus: &str, rate: f64, rng: &mut impl Rng) -> String {
    loop {
        let mut changed = false;
        let mutant: String = consensus
            .chars()
            .map(|c| {
                if rng.gen::<f64>() < rate {
                    let options: Vec<char> =
                        PFM_ROW_ORDER.iter().copied().filter(|&b| b != c).collect();
                    changed = true;
                    options[rng.gen_range(0..options.len())]
                } else {
                    c
                }
            })
            .collect();
        if changed {
            return mutant;
        }
    }
}

/// Mutation scan over JASPAR-style PFMs: per motif, take the consensus,
/// draw `n_mutants` pairwise-distinct mutants at the given substitution
/// rate, score everything with `dg_model`, and report the ΔΔG shift.
/// Each motif gets its own derived RNG stream, so scan order (or
/// parallelism across motifs) cannot change the draws.
pub fn mutation_scan<F>(
    mut dg_model: F,
    pfms: &[Pfm],
    rate: f64,
    n_mutants: usize,
    seed: u64,
) -> Result<Vec<MutationScanResult>, EvalError>
where
    F: FnMut(&str) -> f64,
{
    if !(0.0 < rate && rate < 1.0) {
        return Err(EvalError::BadMutationRate(rate));
    }
    let mut results = Vec::with_capacity(pfms.len());
    for (idx, pfm) in pfms.iter().enumerate() {
        let consensus = pfm_consensus(pfm).sequence;
        // 3 * len single-substitution mutants is already the floor of the
        // distinct-mutant count
        if 3 * consensus.len() < n_mutants {
            return Err(EvalError::TooFewMutants {
                name: pfm.name.clone(),
                len: consensus.len(),
                want: n_mutants,
            });
        }
        let mut rng = derive_indexed(seed, "mutscan", idx as u64);
        let mut mutants: Vec<String> = Vec::with_capacity(n_mutants);
        let mut attempts = 0;
        while mutants.len() < n_mutants {
            let m = mutate_consensus(&consensus, rate, &mut rng);
            if mutants.contains(&m) {
                attempts += 1;
                if attempts > 100 {
                    return Err(EvalError::MutantRedrawExhausted(pfm.name.clone()));
                }
                continue;
            }
            mutants.push(m);
        }
        let dg_consensus = dg_model(&consensus);
        let dg_mutants: Vec<f64> = mutants.iter().map(|m| dg_model(m)).collect();
        let ddg_each: Vec<f64> = dg_mutants.iter().map(|d| d - dg_consensus).collect();
        let ddg_mean = ddg_each.iter().sum::<f64>() / ddg_each.len() as f64;
        results.push(MutationScanResult {
            dbp: pfm.name.clone(),
            consensus,
            mutants,
            dg_consensus,
            dg_mutants,
            ddg_mean,
            ddg_each,
        });
    }
    Ok(results)
}

/// TSV rows: dbp, dg_consensus, the mutant ΔGs, ddg_mean.
pub fn scan_to_tsv(results: &[MutationScanResult]) -> String {
    let mut out = String::from("dbp\tdg_consensus\tdg_mutants\tddg_mean\n");
    for r in results {
        let mutants: Vec<String> = r.dg_mutants.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.dbp,
            r.dg_consensus,
            mutants.join(","),
            r.ddg_mean
        ));
    }
    out
}

/// One JSON line per report.
pub fn reports_to_jsonl(reports: &[MetricReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes"))
        .fold(String::new(), |mut acc, line| {
            acc.push_str(&line);
            acc.push('\n');
            acc
        })
}
