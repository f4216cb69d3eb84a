//! Multi-omic biosequence modeling toolkit.
//!
//! The pipeline runs end to end on a single machine: parse protein and
//! nucleic-acid records, train BPE or per-character tokenizers, pre-train a
//! small non-causal encoder with masked language modeling under maximal
//! update parameterization, fine-tune task heads (binding free energy,
//! per-residue contacts, classification, pairwise contact maps), run
//! frozen-backbone probes, and evaluate with homology-aware splits.

pub mod autodiff;
pub mod evals;
pub mod heads;
pub mod model;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod seqdata;
pub mod splits;
pub mod tokenizer;

pub use seqdata::{BindingPair, ComplexStructure, Modality, Pfm, SeqRecord};
pub use tokenizer::{TokenSeq, Vocab};
