//! Strict per-command JSON config schemas. Unknown keys are rejected so a
//! run is fully determined by (config bytes, input file bytes).

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Deserialize;

/// Schema violations exit with code 2 and a field path; everything else
/// is a runtime failure (exit 1).
#[derive(Debug)]
pub enum AppError {
    Schema(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for AppError {
    fn from(e: E) -> Self {
        AppError::Runtime(e.into())
    }
}

pub fn load_config<T: DeserializeOwned>(path: &PathBuf) -> Result<(T, Vec<u8>), AppError> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Runtime(anyhow::anyhow!("cannot read config {path:?}: {e}")))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    let parsed: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        AppError::Schema(format!("at `{path}`: {}", e.inner()))
    })?;
    Ok((parsed, bytes))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub start_end_scale: f64,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub corpus_fasta: PathBuf,
    /// Per-modality vocabulary size, specials included.
    pub target_vocab: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus_fasta: PathBuf,
    /// Trained vocabulary file; per-character tokenization when absent.
    pub vocab: Option<PathBuf>,
    pub width: usize,
    pub max_len: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_dg_head_lr() -> f64 {
    1e-2
}
fn default_dg_embedding_lr() -> f64 {
    1e-3
}
fn default_dg_matrix_numerator() -> f64 {
    1e-4 * 1024.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneDgConfig {
    pub checkpoint: PathBuf,
    pub vocab: Option<PathBuf>,
    pub pairs_tsv: PathBuf,
    pub steps: u64,
    #[serde(default = "default_dg_head_lr")]
    pub head_lr: f64,
    #[serde(default = "default_dg_embedding_lr")]
    pub embedding_lr: f64,
    #[serde(default = "default_dg_matrix_numerator")]
    pub matrix_lr_numerator: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneContactConfig {
    pub checkpoint: PathBuf,
    pub vocab: Option<PathBuf>,
    pub pairs_tsv: PathBuf,
    /// TSV of `pair_index<TAB>contact bitstring`, one bit per protein residue.
    pub contacts_tsv: PathBuf,
    pub steps: u64,
    #[serde(default = "default_dg_head_lr")]
    pub head_lr: f64,
    #[serde(default = "default_dg_embedding_lr")]
    pub embedding_lr: f64,
    #[serde(default = "default_dg_matrix_numerator")]
    pub matrix_lr_numerator: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneClassifyConfig {
    pub checkpoint: PathBuf,
    pub vocab: Option<PathBuf>,
    pub corpus_fasta: PathBuf,
    /// TSV of `record_id<TAB>class index`.
    pub labels_tsv: PathBuf,
    pub n_classes: usize,
    pub steps: u64,
    #[serde(default = "default_dg_head_lr")]
    pub head_lr: f64,
    #[serde(default = "default_dg_embedding_lr")]
    pub embedding_lr: f64,
    #[serde(default = "default_dg_matrix_numerator")]
    pub matrix_lr_numerator: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_min_separation() -> usize {
    12
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetunePairwiseContactConfig {
    pub checkpoint: PathBuf,
    pub vocab: Option<PathBuf>,
    pub corpus_fasta: PathBuf,
    /// TSV of `record_id<TAB>row-major L×L contact bitstring`.
    pub maps_tsv: PathBuf,
    pub steps: u64,
    #[serde(default = "default_min_separation")]
    pub min_separation: usize,
    #[serde(default = "default_dg_head_lr")]
    pub head_lr: f64,
    #[serde(default = "default_dg_embedding_lr")]
    pub embedding_lr: f64,
    #[serde(default = "default_dg_matrix_numerator")]
    pub matrix_lr_numerator: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_projector_rank() -> usize {
    16
}
fn default_tau() -> f64 {
    0.07
}
fn default_projector_steps() -> usize {
    10_000
}
fn default_projector_lr() -> f64 {
    0.01
}
fn default_train_fraction() -> f64 {
    0.05
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeJointConfig {
    pub checkpoint: PathBuf,
    pub vocab: Option<PathBuf>,
    pub pairs_tsv: PathBuf,
    #[serde(default = "default_projector_rank")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_projector_steps")]
    pub steps: usize,
    #[serde(default = "default_projector_lr")]
    pub lr: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_attn_steps() -> usize {
    1000
}
fn default_attn_batch() -> usize {
    256
}
fn default_attn_lr() -> f64 {
    1e-3
}
fn default_one_fold() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeAttnConfig {
    pub checkpoint: PathBuf,
    /// Second backbone for the per-fold F1 comparison, if any.
    pub baseline_checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub pairs_tsv: PathBuf,
    pub contacts_tsv: PathBuf,
    #[serde(default = "default_attn_steps")]
    pub steps: usize,
    #[serde(default = "default_attn_batch")]
    pub batch: usize,
    #[serde(default = "default_attn_lr")]
    pub lr: f64,
    #[serde(default = "default_one_fold")]
    pub n_folds: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_n_folds() -> usize {
    10
}
fn default_quarantine() -> f64 {
    1.5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub pairs_tsv: PathBuf,
    #[serde(default = "default_n_folds")]
    pub n_folds: usize,
    #[serde(default = "default_quarantine")]
    pub quarantine_threshold: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// TSV of `prediction<TAB>label` rows.
    pub predictions_tsv: PathBuf,
    /// Metric names in snake_case (pcc, spearman, mae, mcc, f1, accuracy, aucroc).
    pub metrics: Vec<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_mut_rate() -> f64 {
    0.05
}
fn default_n_mutants() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutscanConfig {
    pub checkpoint: PathBuf,
    /// ΔG head tensors from `finetune-dg`.
    pub head: PathBuf,
    pub vocab: Option<PathBuf>,
    pub jaspar: PathBuf,
    /// FASTA of DBP protein sequences; ids must match motif names.
    pub protein_fasta: PathBuf,
    #[serde(default = "default_mut_rate")]
    pub rate: f64,
    #[serde(default = "default_n_mutants")]
    pub n_mutants: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

macro_rules! overridable {
    ($($t:ty),* $(,)?) => {
        $(impl $t {
            pub fn apply_overrides(&mut self, seed: Option<u64>, out_dir: Option<PathBuf>) {
                if let Some(s) = seed {
                    self.seed = s;
                }
                if let Some(d) = out_dir {
                    self.out_dir = d;
                }
            }
        })*
    };
}

overridable!(
    TokenizerTrainConfig,
    PretrainConfig,
    FinetuneDgConfig,
    FinetuneContactConfig,
    FinetuneClassifyConfig,
    FinetunePairwiseContactConfig,
    ProbeJointConfig,
    ProbeAttnConfig,
    SplitConfig,
    EvalConfig,
    MutscanConfig,
);
