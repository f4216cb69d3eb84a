//! Homology-aware dataset splitting: BLOSUM62 global alignment, protein
//! grouping, train-only quarantine of near-duplicates, and balanced
//! k-fold construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqdata::BindingPair;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("cannot align an empty sequence")]
    EmptySequence,
    #[error("residue '{0}' is outside the BLOSUM62 alphabet")]
    BadResidue(char),
    #[error("need at least {need} protein groups after quarantine, have {have}")]
    InsufficientGroups { have: usize, need: usize },
    #[error("fold count {0} must be at least 2")]
    BadFoldCount(usize),
}

/// Residue order of the rows/columns below (canonical BLOSUM62 layout).
pub const BLOSUM62_ALPHABET: &str = "ARNDCQEGHILKMFPSTWYV";

/// The canonical 20x20 BLOSUM62 substitution matrix. Integrity is pinned
/// by checksum and symmetry tests rather than trusting transcription.
pub const BLOSUM62: [[i32; 20]; 20] = [
    [4, -1, -2, -2, 0, -1, -1, 0, -2, -1, -1, -1, -1, -2, -1, 1, 0, -3, -2, 0],
    [-1, 5, 0, -2, -3, 1, 0, -2, 0, -3, -2, 2, -1, -3, -2, -1, -1, -3, -2, -3],
    [-2, 0, 6, 1, -3, 0, 0, 0, 1, -3, -3, 0, -2, -3, -2, 1, 0, -4, -2, -3],
    [-2, -2, 1, 6, -3, 0, 2, -1, -1, -3, -4, -1, -3, -3, -1, 0, -1, -4, -3, -3],
    [0, -3, -3, -3, 9, -3, -4, -3, -3, -1, -1, -3, -1, -2, -3, -1, -1, -2, -2, -1],
    [-1, 1, 0, 0, -3, 5, 2, -2, 0, -3, -2, 1, 0, -3, -1, 0, -1, -2, -1, -2],
    [-1, 0, 0, 2, -4, 2, 5, -2, 0, -3, -3, 1, -2, -3, -1, 0, -1, -3, -2, -2],
    [0, -2, 0, -1, -3, -2, -2, 6, -2, -4, -4, -2, -3, -3, -2, 0, -2, -2, -3, -3],
    [-2, 0, 1, -1, -3, 0, 0, -2, 8, -3, -3, -1, -2, -1, -2, -1, -2, -2, 2, -3],
    [-1, -3, -3, -3, -1, -3, -3, -4, -3, 4, 2, -3, 1, 0, -3, -2, -1, -3, -1, 3],
    [-1, -2, -3, -4, -1, -2, -3, -4, -3, 2, 4, -2, 2, 0, -3, -2, -1, -2, -1, 1],
    [-1, 2, 0, -1, -3, 1, 1, -2, -1, -3, -2, 5, -1, -3, -1, 0, -1, -3, -2, -2],
    [-1, -1, -2, -3, -1, 0, -2, -3, -2, 1, 2, -1, 5, 0, -2, -1, -1, -1, -1, 1],
    [-2, -3, -3, -3, -2, -3, -3, -3, -1, 0, 0, -3, 0, 6, -4, -2, -2, 1, 3, -1],
    [-1, -2, -2, -1, -3, -1, -1, -2, -2, -3, -3, -1, -2, -4, 7, -1, -1, -4, -3, -2],
    [1, -1, 1, 0, -1, 0, 0, 0, -1, -2, -2, 0, -1, -2, -1, 4, 1, -3, -2, -2],
    [0, -1, 0, -1, -1, -1, -1, -2, -2, -1, -1, -1, -1, -2, -1, 1, 5, -2, -2, 0],
    [-3, -3, -4, -4, -2, -2, -3, -2, -2, -3, -2, -3, -1, 1, -4, -3, -2, 11, 2, -3],
    [-2, -2, -2, -3, -2, -1, -2, -3, 2, -1, -1, -2, -1, 3, -3, -2, -2, 2, 7, -1],
    [0, -3, -3, -3, -1, -2, -2, -3, -3, 3, 1, -2, 1, -1, -2, -2, 0, -3, -1, 4],
];

/// Linear gap penalty per gap position (no affine extension).
pub const GAP_PENALTY: i64 = -4;

fn residue_index(c: char) -> Result<usize, SplitError> {
    BLOSUM62_ALPHABET
        .chars()
        .position(|a| a == c)
        .ok_or(SplitError::BadResidue(c))
}

pub fn blosum62_score(a: char, b: char) -> Result<i64, SplitError> {
    Ok(BLOSUM62[residue_index(a)?][residue_index(b)?] as i64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentScore {
    pub raw: i64,
    /// raw / max(len_a, len_b); identical sequences land near the mean
    /// BLOSUM62 diagonal (~5.2 at natural residue frequencies).
    pub normalized: f64,
}

/// Needleman-Wunsch global alignment score under BLOSUM62 with a linear
/// gap penalty.
pub fn blosum_align(a: &str, b: &str) -> Result<AlignmentScore, SplitError> {
    let ai: Vec<usize> = a.chars().map(residue_index).collect::<Result<_, _>>()?;
    let bi: Vec<usize> = b.chars().map(residue_index).collect::<Result<_, _>>()?;
    if ai.is_empty() || bi.is_empty() {
        return Err(SplitError::EmptySequence);
    }
    let (n, m) = (ai.len(), bi.len());
    // one rolling row of the DP table
    let mut prev: Vec<i64> = (0..=m as i64).map(|j| j * GAP_PENALTY).collect();
    let mut cur = vec![0i64; m + 1];
    for i in 1..=n {
        cur[0] = i as i64 * GAP_PENALTY;
        for j in 1..=m {
            let sub = prev[j - 1] + BLOSUM62[ai[i - 1]][bi[j - 1]] as i64;
            cur[j] = sub.max(prev[j] + GAP_PENALTY).max(cur[j - 1] + GAP_PENALTY);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let raw = prev[m];
    Ok(AlignmentScore {
        raw,
        normalized: raw as f64 / n.max(m) as f64,
    })
}

/// All binding pairs sharing one exact protein sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProteinGroup {
    pub id: usize,
    pub protein: String,
    /// Indices into the original pair list.
    pub pair_indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoldAssignment {
    pub groups: Vec<ProteinGroup>,
    /// Group ids per fold; validation fold k trains on all other folds.
    pub folds: Vec<Vec<usize>>,
    /// Group ids that appear in every training set and no validation fold.
    pub quarantined: Vec<usize>,
}

impl FoldAssignment {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold assignment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Protein-disjoint k-fold split. Identical protein sequences share a
/// group; any group with normalized similarity above `quarantine_threshold`
/// to another group is forced into the train side of every fold; the rest
/// are shuffled and dealt greedily, largest pair count first, onto the
/// currently lightest fold.
pub fn build_folds(
    pairs: &[BindingPair],
    n_folds: usize,
    quarantine_threshold: f64,
    rng: &mut impl Rng,
) -> Result<FoldAssignment, SplitError> {
    if n_folds < 2 {
        return Err(SplitError::BadFoldCount(n_folds));
    }
    let mut by_protein: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, pair) in pairs.iter().enumerate() {
        by_protein
            .entry(pair.protein.sequence.as_str())
            .or_default()
            .push(idx);
    }
    let groups: Vec<ProteinGroup> = by_protein
        .into_iter()
        .enumerate()
        .map(|(id, (protein, pair_indices))| ProteinGroup {
            id,
            protein: protein.to_string(),
            pair_indices,
        })
        .collect();

    let mut quarantined = Vec::new();
    let mut free = Vec::new();
    for g in &groups {
        let near_duplicate = groups.iter().any(|other| {
            other.id != g.id
                && blosum_align(&g.protein, &other.protein)
                    .map(|s| s.normalized > quarantine_threshold)
                    .unwrap_or(false)
        });
        if near_duplicate {
            quarantined.push(g.id);
        } else {
            free.push(g.id);
        }
    }
    if free.len() < n_folds {
        return Err(SplitError::InsufficientGroups {
            have: free.len(),
            need: n_folds,
        });
    }

    free.shuffle(rng);
    // stable sort keeps the shuffled order among equal pair counts
    free.sort_by_key(|&id| std::cmp::Reverse(groups[id].pair_indices.len()));
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); n_folds];
    let mut weights = vec![0usize; n_folds];
    for id in free {
        let lightest = (0..n_folds).min_by_key(|&k| (weights[k], k)).unwrap();
        weights[lightest] += groups[id].pair_indices.len();
        folds[lightest].push(id);
    }

    Ok(FoldAssignment {
        groups,
        folds,
        quarantined,
    })
}

/// Fraction of cross-fold group pairs whose normalized similarity exceeds
/// 1.0 — a leakage audit, reported rather than enforced. `None` when there
/// are no cross-fold pairs.
pub fn leakage_fraction(assignment: &FoldAssignment) -> Result<Option<f64>, SplitError> {
    let mut total = 0u64;
    let mut leaky = 0u64;
    for (ka, fold_a) in assignment.folds.iter().enumerate() {
        for fold_b in assignment.folds.iter().skip(ka + 1) {
            for &ga in fold_a {
                for &gb in fold_b {
                    total += 1;
                    let score = blosum_align(
                        &assignment.groups[ga].protein,
                        &assignment.groups[gb].protein,
                    )?;
                    if score.normalized > 1.0 {
                        leaky += 1;
                    }
                }
            }
        }
    }
    Ok(if total == 0 {
        None
    } else {
        Some(leaky as f64 / total as f64)
    })
}
