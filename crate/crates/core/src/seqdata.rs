//! Biosequence ingestion: FASTA-like records, binding tables, pre-extracted
//! complex structures, and JASPAR-style position frequency matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTEIN_ALPHABET: &str = "ACDEFGHIKLMNPQRSTVWY";
pub const NUCLEIC_ALPHABET: &str = "ACGTU";

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("empty sequence for record '{0}'")]
    EmptySequence(String),
    #[error("record '{id}': character '{ch}' at position {pos} outside the {modality:?} alphabet")]
    BadCharacter {
        id: String,
        ch: char,
        pos: usize,
        modality: Modality,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown modality tag '{0}'")]
    UnknownModality(String),
    #[error("binding pair: {0}")]
    BadPair(String),
    #[error("residue {0} has no atoms; contact label undefined")]
    ResidueWithoutAtoms(usize),
    #[error("structure invalid: {0}")]
    BadStructure(String),
    #[error("PFM '{name}' invalid: {reason}")]
    BadPfm { name: String, reason: String },
    #[error("malformed table line {line}: {reason}")]
    BadTableLine { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Protein,
    Dna,
    Rna,
    Mrna,
    Crna,
    Rrna,
    Trna,
    SsDna,
    SsRna,
    DsRna,
    OtherNa,
}

impl Modality {
    pub fn is_nucleic(self) -> bool {
        !matches!(self, Modality::Protein)
    }

    pub fn alphabet(self) -> &'static str {
        if self.is_nucleic() {
            NUCLEIC_ALPHABET
        } else {
            PROTEIN_ALPHABET
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self, SeqError> {
        Ok(match tag.to_ascii_lowercase().as_str() {
            "protein" => Modality::Protein,
            "dna" => Modality::Dna,
            "rna" => Modality::Rna,
            "mrna" => Modality::Mrna,
            "crna" => Modality::Crna,
            "rrna" => Modality::Rrna,
            "trna" => Modality::Trna,
            "ss_dna" | "ssdna" => Modality::SsDna,
            "ss_rna" | "ssrna" => Modality::SsRna,
            "ds_rna" | "dsrna" => Modality::DsRna,
            "other_na" => Modality::OtherNa,
            other => return Err(SeqError::UnknownModality(other.to_string())),
        })
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Protein => "protein",
            Modality::Dna => "dna",
            Modality::Rna => "rna",
            Modality::Mrna => "mrna",
            Modality::Crna => "crna",
            Modality::Rrna => "rrna",
            Modality::Trna => "trna",
            Modality::SsDna => "ss_dna",
            Modality::SsRna => "ss_rna",
            Modality::DsRna => "ds_rna",
            Modality::OtherNa => "other_na",
        }
    }
}

/// One validated biosequence. All metadata except the modality tag is gone
/// by the time a record exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqRecord {
    pub id: String,
    pub modality: Modality,
    pub sequence: String,
}

impl SeqRecord {
    pub fn new(id: &str, modality: Modality, sequence: &str) -> Result<Self, SeqError> {
        let sequence = sequence.to_ascii_uppercase();
        if sequence.is_empty() {
            return Err(SeqError::EmptySequence(id.to_string()));
        }
        let alphabet = modality.alphabet();
        for (pos, ch) in sequence.chars().enumerate() {
            if !alphabet.contains(ch) {
                return Err(SeqError::BadCharacter {
                    id: id.to_string(),
                    ch,
                    pos,
                    modality,
                });
            }
        }
        Ok(SeqRecord {
            id: id.to_string(),
            modality,
            sequence,
        })
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Protein plus one or two nucleic-acid strands and an optional binding
/// free energy label in kcal/mol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingPair {
    pub protein: SeqRecord,
    pub na1: SeqRecord,
    pub na2: Option<SeqRecord>,
    pub dg: Option<f64>,
}

impl BindingPair {
    pub fn new(
        protein: SeqRecord,
        na1: SeqRecord,
        na2: Option<SeqRecord>,
        dg: Option<f64>,
    ) -> Result<Self, SeqError> {
        if protein.modality != Modality::Protein {
            return Err(SeqError::BadPair(format!(
                "'{}' is not a protein record",
                protein.id
            )));
        }
        for na in std::iter::once(&na1).chain(na2.as_ref()) {
            if !na.modality.is_nucleic() {
                return Err(SeqError::BadPair(format!(
                    "'{}' is not a nucleic record",
                    na.id
                )));
            }
        }
        if let Some(v) = dg {
            if !v.is_finite() {
                return Err(SeqError::BadPair("dg is not finite".to_string()));
            }
        }
        Ok(BindingPair {
            protein,
            na1,
            na2,
            dg,
        })
    }
}

/// Pre-extracted atom table for a protein / nucleic-acid complex.
/// Coordinates in Angstroms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexStructure {
    pub protein_atoms: Vec<(usize, [f64; 3])>,
    pub na_atoms: Vec<(usize, [f64; 3])>,
    pub n_residues: usize,
}

impl ComplexStructure {
    pub fn new(
        protein_atoms: Vec<(usize, [f64; 3])>,
        na_atoms: Vec<(usize, [f64; 3])>,
        n_residues: usize,
    ) -> Result<Self, SeqError> {
        for (idx, xyz) in &protein_atoms {
            if *idx >= n_residues {
                return Err(SeqError::BadStructure(format!(
                    "residue index {idx} out of range (n_residues = {n_residues})"
                )));
            }
            if xyz.iter().any(|c| !c.is_finite()) {
                return Err(SeqError::BadStructure("non-finite coordinate".to_string()));
            }
        }
        for (_, xyz) in &na_atoms {
            if xyz.iter().any(|c| !c.is_finite()) {
                return Err(SeqError::BadStructure("non-finite coordinate".to_string()));
            }
        }
        Ok(ComplexStructure {
            protein_atoms,
            na_atoms,
            n_residues,
        })
    }
}

/// Position frequency matrix: rows A, C, G, T.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pfm {
    pub name: String,
    /// counts[row][col], rows in A, C, G, T order.
    pub counts: [Vec<f64>; 4],
}

pub const PFM_ROW_ORDER: [char; 4] = ['A', 'C', 'G', 'T'];

impl Pfm {
    pub fn new(name: &str, counts: [Vec<f64>; 4]) -> Result<Self, SeqError> {
        let len = counts[0].len();
        if len == 0 {
            return Err(SeqError::BadPfm {
                name: name.to_string(),
                reason: "zero columns".to_string(),
            });
        }
        if counts.iter().any(|row| row.len() != len) {
            return Err(SeqError::BadPfm {
                name: name.to_string(),
                reason: "ragged rows".to_string(),
            });
        }
        for col in 0..len {
            let sum: f64 = counts.iter().map(|row| row[col]).sum();
            if !(sum > 0.0) || counts.iter().any(|row| row[col] < 0.0) {
                return Err(SeqError::BadPfm {
                    name: name.to_string(),
                    reason: format!("column {col} is not non-negative with positive sum"),
                });
            }
        }
        Ok(Pfm {
            name: name.to_string(),
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.counts[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records that survived parsing plus one diagnostic per rejected record.
#[derive(Debug, Default)]
pub struct FastaParse {
    pub records: Vec<SeqRecord>,
    pub rejected: Vec<String>,
}

/// Parse FASTA-like text. Headers are `>id` optionally followed by
/// `type=<tag>`; any other header metadata is discarded. Untagged records
/// default to dna when every character is a standard base, otherwise
/// protein. Records with out-of-alphabet characters are rejected, not
/// repaired.
pub fn parse_fasta(input: &str) -> FastaParse {
    let mut out = FastaParse::default();
    let mut header: Option<String> = None;
    let mut seq = String::new();

    let flush = |header: &Option<String>, seq: &str, out: &mut FastaParse| {
        let Some(h) = header else { return };
        match record_from_entry(h, seq) {
            Ok(rec) => out.records.push(rec),
            Err(e) => out.rejected.push(format!("{h}: {e}")),
        }
    };

    for line in input.lines() {
        let line = line.trim_end();
        if let Some(rest) = line.strip_prefix('>') {
            flush(&header, &seq, &mut out);
            header = Some(rest.trim().to_string());
            seq.clear();
        } else if !line.trim().is_empty() {
            if header.is_none() {
                out.rejected
                    .push(format!("sequence data before any header: '{line}'"));
                continue;
            }
            seq.push_str(line.trim());
        }
    }
    flush(&header, &seq, &mut out);
    out
}

fn record_from_entry(header: &str, seq: &str) -> Result<SeqRecord, SeqError> {
    let mut fields = header.split_whitespace();
    let id = fields
        .next()
        .ok_or_else(|| SeqError::MalformedHeader("empty header".to_string()))?;
    let mut modality = None;
    for field in fields {
        if let Some(tag) = field.strip_prefix("type=") {
            modality = Some(Modality::from_tag(tag)?);
        }
    }
    let seq_upper = seq.to_ascii_uppercase();
    let modality = modality.unwrap_or_else(|| {
        if !seq_upper.is_empty() && seq_upper.chars().all(|c| NUCLEIC_ALPHABET.contains(c)) {
            Modality::Dna
        } else {
            Modality::Protein
        }
    });
    SeqRecord::new(id, modality, &seq_upper)
}

/// Serialize records back to the same FASTA dialect `parse_fasta` reads.
pub fn write_fasta(records: &[SeqRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&format!(
            ">{} type={}\n{}\n",
            rec.id,
            rec.modality.tag(),
            rec.sequence
        ));
    }
    out
}

/// Parse a ProNAB-style TSV: protein_seq, na1_seq, na2_seq-or-empty, dg.
/// An optional header row starting with "protein_seq" is skipped.
pub fn parse_binding_tsv(input: &str) -> Result<Vec<BindingPair>, SeqError> {
    let mut pairs = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 0 && line.starts_with("protein_seq") {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(SeqError::BadTableLine {
                line: line_no + 1,
                reason: format!("expected 4 tab-separated columns, got {}", cols.len()),
            });
        }
        let protein = SeqRecord::new(&format!("p{line_no}"), Modality::Protein, cols[0])?;
        let na1 = nucleic_record(&format!("n{line_no}a"), cols[1])?;
        let na2 = if cols[2].trim().is_empty() {
            None
        } else {
            Some(nucleic_record(&format!("n{line_no}b"), cols[2])?)
        };
        let dg = if cols[3].trim().is_empty() {
            None
        } else {
            let v: f64 = cols[3].trim().parse().map_err(|_| SeqError::BadTableLine {
                line: line_no + 1,
                reason: format!("cannot parse dg '{}'", cols[3]),
            })?;
            Some(v)
        };
        pairs.push(BindingPair::new(protein, na1, na2, dg)?);
    }
    Ok(pairs)
}

fn nucleic_record(id: &str, seq: &str) -> Result<SeqRecord, SeqError> {
    let modality = if seq.to_ascii_uppercase().contains('U') {
        Modality::Rna
    } else {
        Modality::Dna
    };
    SeqRecord::new(id, modality, seq)
}

/// Parse a JASPAR-style PFM file: `>name` then four labeled count rows
/// (A, C, G, T), each optionally bracketed.
pub fn parse_jaspar(input: &str) -> Result<Vec<Pfm>, SeqError> {
    let mut pfms = Vec::new();
    let mut name: Option<String> = None;
    let mut rows: [Option<Vec<f64>>; 4] = [None, None, None, None];

    let flush = |name: &mut Option<String>,
                     rows: &mut [Option<Vec<f64>>; 4]|
     -> Result<Option<Pfm>, SeqError> {
        let Some(n) = name.take() else { return Ok(None) };
        let mut counts: [Vec<f64>; 4] = Default::default();
        for (i, row) in rows.iter_mut().enumerate() {
            counts[i] = row.take().ok_or_else(|| SeqError::BadPfm {
                name: n.clone(),
                reason: format!("missing row {}", PFM_ROW_ORDER[i]),
            })?;
        }
        Pfm::new(&n, counts).map(Some)
    };

    for (line_no, line) in input.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('>') {
            if let Some(p) = flush(&mut name, &mut rows)? {
                pfms.push(p);
            }
            let id = rest.split_whitespace().next().unwrap_or(rest);
            name = Some(id.to_string());
        } else {
            let (base, values) = line.split_at(1);
            let base = base.chars().next().unwrap().to_ascii_uppercase();
            let row_idx = PFM_ROW_ORDER
                .iter()
                .position(|&b| b == base)
                .ok_or_else(|| SeqError::BadTableLine {
                    line: line_no + 1,
                    reason: format!("unexpected row label '{base}'"),
                })?;
            let mut parsed = Vec::new();
            for tok in values
                .trim()
                .trim_start_matches('[')
                .trim_end_matches(']')
                .split_whitespace()
            {
                let v: f64 = tok.parse().map_err(|_| SeqError::BadTableLine {
                    line: line_no + 1,
                    reason: format!("cannot parse count '{tok}'"),
                })?;
                parsed.push(v);
            }
            rows[row_idx] = Some(parsed);
        }
    }
    if let Some(p) = flush(&mut name, &mut rows)? {
        pfms.push(p);
    }
    Ok(pfms)
}

/// Per-residue contact labels: residue i contacts iff the minimum distance
/// from any of its atoms to any nucleotide atom is within `threshold`
/// Angstroms.
pub fn label_contacts(
    structure: &ComplexStructure,
    threshold: f64,
) -> Result<Vec<bool>, SeqError> {
    let mut min_dist = vec![f64::INFINITY; structure.n_residues];
    for (res, pa) in &structure.protein_atoms {
        for (_, na) in &structure.na_atoms {
            let d2 = (pa[0] - na[0]).powi(2) + (pa[1] - na[1]).powi(2) + (pa[2] - na[2]).powi(2);
            let d = d2.sqrt();
            if d < min_dist[*res] {
                min_dist[*res] = d;
            }
        }
    }
    let mut has_atoms = vec![false; structure.n_residues];
    for (res, _) in &structure.protein_atoms {
        has_atoms[*res] = true;
    }
    min_dist
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if !has_atoms[i] {
                Err(SeqError::ResidueWithoutAtoms(i))
            } else {
                Ok(d <= threshold)
            }
        })
        .collect()
}

/// Consensus sequence of a PFM: per-column argmax over A, C, G, T with ties
/// broken by that fixed row order.
pub fn pfm_consensus(pfm: &Pfm) -> SeqRecord {
    let mut seq = String::with_capacity(pfm.len());
    for col in 0..pfm.len() {
        let mut best = 0;
        for row in 1..4 {
            if pfm.counts[row][col] > pfm.counts[best][col] {
                best = row;
            }
        }
        seq.push(PFM_ROW_ORDER[best]);
    }
    SeqRecord::new(&pfm.name, Modality::Dna, &seq).expect("consensus is over ACGT")
}
