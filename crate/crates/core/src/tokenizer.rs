//! Modality-partitioned tokenization: byte-pair encoding trained per
//! modality, a per-character scheme, and paired-sequence packing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqdata::{BindingPair, SeqRecord, NUCLEIC_ALPHABET, PROTEIN_ALPHABET};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus for {0:?} training")]
    EmptyCorpus(TokenClass),
    #[error("target vocab {target} below alphabet size {alphabet}")]
    TargetTooSmall { target: usize, alphabet: usize },
    #[error("character '{ch}' at position {pos} not in the {class:?} vocabulary alphabet")]
    OutOfAlphabet {
        ch: char,
        pos: usize,
        class: TokenClass,
    },
    #[error("token id {0} out of range")]
    BadTokenId(u32),
    #[error("encoded pair length {len} exceeds max_len {max_len}")]
    Overflow { len: usize, max_len: usize },
    #[error("vocab file malformed: {0}")]
    BadVocabFile(String),
    #[error("token '{token}' spans modalities")]
    CrossModalToken { token: String },
}

/// Which vocabulary partition a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Protein,
    Nucleic,
    Special,
}

impl TokenClass {
    pub fn alphabet(self) -> &'static str {
        match self {
            TokenClass::Protein => PROTEIN_ALPHABET,
            TokenClass::Nucleic => NUCLEIC_ALPHABET,
            TokenClass::Special => "",
        }
    }

    pub fn of_modality(m: crate::seqdata::Modality) -> Self {
        if m.is_nucleic() {
            TokenClass::Nucleic
        } else {
            TokenClass::Protein
        }
    }
}

pub const SPECIAL_TOKENS: [&str; 4] = ["<cls>", "<sep>", "<mask>", "<pad>"];
pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const MASK: u32 = 2;
pub const PAD: u32 = 3;
pub const N_SPECIALS: u32 = 4;

/// One trained modality partition: token strings plus the ordered merge
/// list that produced them. `exhausted` flags a corpus that ran out of
/// mergeable pairs before reaching the requested size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpePartition {
    pub tokens: Vec<String>,
    pub merges: Vec<(String, String)>,
    pub exhausted: bool,
}

impl BpePartition {
    /// Per-character partition over the full modality alphabet, no merges.
    pub fn per_character(class: TokenClass) -> Self {
        BpePartition {
            tokens: class.alphabet().chars().map(|c| c.to_string()).collect(),
            merges: Vec::new(),
            exhausted: false,
        }
    }
}

/// Greedy BPE training: start from the corpus's single characters and merge
/// the most frequent adjacent pair until `target_vocab` tokens exist. Pair
/// frequency counts every adjacent symbol position; ties break
/// lexicographically on (left, right). Deterministic for a fixed corpus
/// order; the seed is accepted for interface stability but the procedure
/// draws nothing from it.
pub fn train_bpe(
    corpus: &[SeqRecord],
    class: TokenClass,
    target_vocab: usize,
    _rng_seed: u64,
) -> Result<BpePartition, TokenizerError> {
    let sequences: Vec<&SeqRecord> = corpus
        .iter()
        .filter(|r| TokenClass::of_modality(r.modality) == class)
        .collect();
    if sequences.is_empty() {
        return Err(TokenizerError::EmptyCorpus(class));
    }

    let mut alphabet: Vec<char> = sequences
        .iter()
        .flat_map(|r| r.sequence.chars())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    alphabet.sort_unstable();
    if target_vocab < alphabet.len() {
        return Err(TokenizerError::TargetTooSmall {
            target: target_vocab,
            alphabet: alphabet.len(),
        });
    }

    let mut tokens: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    // Working corpus as symbol id sequences to keep the scan cheap.
    let mut id_of: HashMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    let mut work: Vec<Vec<u32>> = sequences
        .iter()
        .map(|r| {
            r.sequence
                .chars()
                .map(|c| id_of[&c.to_string()])
                .collect()
        })
        .collect();

    let mut exhausted = false;
    while tokens.len() < target_vocab {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for seq in &work {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts.into_iter().max_by(|a, b| {
            a.1.cmp(&b.1).then_with(|| {
                // lexicographic tie-break on token strings, smallest wins
                let ka = (&tokens[a.0 .0 as usize], &tokens[a.0 .1 as usize]);
                let kb = (&tokens[b.0 .0 as usize], &tokens[b.0 .1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else {
            exhausted = true;
            break;
        };
        let new_token = format!("{}{}", tokens[left as usize], tokens[right as usize]);
        let new_id = tokens.len() as u32;
        merges.push((
            tokens[left as usize].clone(),
            tokens[right as usize].clone(),
        ));
        tokens.push(new_token.clone());
        id_of.insert(new_token, new_id);
        for seq in &mut work {
            merge_in_place(seq, left, right, new_id);
        }
    }

    Ok(BpePartition {
        tokens,
        merges,
        exhausted,
    })
}

/// Greedy left-to-right replacement of the pair (left, right) by `merged`.
fn merge_in_place(seq: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Modality-partitioned token table. Ids are dense: the four specials,
/// then the protein partition, then the nucleic partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub protein: BpePartition,
    pub nucleic: BpePartition,
}

impl Vocab {
    pub fn new(protein: BpePartition, nucleic: BpePartition) -> Result<Self, TokenizerError> {
        for t in &protein.tokens {
            if t.chars().any(|c| !PROTEIN_ALPHABET.contains(c)) {
                return Err(TokenizerError::CrossModalToken { token: t.clone() });
            }
        }
        for t in &nucleic.tokens {
            if t.chars().any(|c| !NUCLEIC_ALPHABET.contains(c)) {
                return Err(TokenizerError::CrossModalToken { token: t.clone() });
            }
        }
        Ok(Vocab { protein, nucleic })
    }

    /// The 20 + 5 per-character vocabulary.
    pub fn per_character() -> Self {
        Vocab {
            protein: BpePartition::per_character(TokenClass::Protein),
            nucleic: BpePartition::per_character(TokenClass::Nucleic),
        }
    }

    pub fn size(&self) -> usize {
        N_SPECIALS as usize + self.protein.tokens.len() + self.nucleic.tokens.len()
    }

    fn partition(&self, class: TokenClass) -> &BpePartition {
        match class {
            TokenClass::Protein => &self.protein,
            TokenClass::Nucleic => &self.nucleic,
            TokenClass::Special => unreachable!("specials have no partition"),
        }
    }

    fn base_id(&self, class: TokenClass) -> u32 {
        match class {
            TokenClass::Protein => N_SPECIALS,
            TokenClass::Nucleic => N_SPECIALS + self.protein.tokens.len() as u32,
            TokenClass::Special => 0,
        }
    }

    pub fn class_of(&self, id: u32) -> Result<TokenClass, TokenizerError> {
        let n_prot = self.protein.tokens.len() as u32;
        let n_nuc = self.nucleic.tokens.len() as u32;
        if id < N_SPECIALS {
            Ok(TokenClass::Special)
        } else if id < N_SPECIALS + n_prot {
            Ok(TokenClass::Protein)
        } else if id < N_SPECIALS + n_prot + n_nuc {
            Ok(TokenClass::Nucleic)
        } else {
            Err(TokenizerError::BadTokenId(id))
        }
    }

    pub fn token_string(&self, id: u32) -> Result<&str, TokenizerError> {
        match self.class_of(id)? {
            TokenClass::Special => Ok(SPECIAL_TOKENS[id as usize]),
            class => {
                Ok(&self.partition(class).tokens[(id - self.base_id(class)) as usize])
            }
        }
    }

    /// UTF-8 text serialization; byte-identical files iff identical vocabs.
    pub fn to_text(&self) -> String {
        let mut out = String::from("polyomic-vocab v1\n");
        for (section, part) in [("protein", &self.protein), ("nucleic", &self.nucleic)] {
            out.push_str(&format!("[{section}]\n"));
            for t in &part.tokens {
                out.push_str(t);
                out.push('\n');
            }
            out.push_str(&format!("[{section}-merges]\n"));
            for (l, r) in &part.merges {
                out.push_str(&format!("{l}\t{r}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        if lines.next() != Some("polyomic-vocab v1") {
            return Err(TokenizerError::BadVocabFile(
                "missing version header".to_string(),
            ));
        }
        let mut sections: HashMap<String, Vec<String>> = HashMap::new();
        let mut current: Option<String> = None;
        for line in lines {
            if line.starts_with('[') && line.ends_with(']') {
                let name = line[1..line.len() - 1].to_string();
                sections.entry(name.clone()).or_default();
                current = Some(name);
            } else if let Some(name) = &current {
                sections.get_mut(name).unwrap().push(line.to_string());
            } else {
                return Err(TokenizerError::BadVocabFile(format!(
                    "content before first section: '{line}'"
                )));
            }
        }
        let take = |name: &str| -> Result<Vec<String>, TokenizerError> {
            sections
                .get(name)
                .cloned()
                .ok_or_else(|| TokenizerError::BadVocabFile(format!("missing section [{name}]")))
        };
        let parse_merges = |lines: Vec<String>| -> Result<Vec<(String, String)>, TokenizerError> {
            lines
                .into_iter()
                .map(|l| {
                    l.split_once('\t')
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .ok_or_else(|| {
                            TokenizerError::BadVocabFile(format!("malformed merge line '{l}'"))
                        })
                })
                .collect()
        };
        Vocab::new(
            BpePartition {
                tokens: take("protein")?,
                merges: parse_merges(take("protein-merges")?)?,
                exhausted: false,
            },
            BpePartition {
                tokens: take("nucleic")?,
                merges: parse_merges(take("nucleic-merges")?)?,
                exhausted: false,
            },
        )
    }
}

/// What a token position holds; heads use this to restrict losses to
/// protein positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Special,
    Protein,
    Nucleic,
}

/// Token ids plus, per token, the half-open residue span it covers in the
/// underlying residue string (specials cover nothing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub residue_spans: Vec<(usize, usize)>,
    pub kinds: Vec<TokenKind>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encode one sequence: split to characters, then apply the partition's
/// merges in training order.
pub fn encode(seq: &SeqRecord, vocab: &Vocab) -> Result<TokenSeq, TokenizerError> {
    let class = TokenClass::of_modality(seq.modality);
    let (ids, spans) = encode_segment(&seq.sequence, 0, class, vocab)?;
    let kinds = vec![kind_of(class); ids.len()];
    Ok(TokenSeq {
        ids,
        residue_spans: spans,
        kinds,
    })
}

fn kind_of(class: TokenClass) -> TokenKind {
    match class {
        TokenClass::Protein => TokenKind::Protein,
        TokenClass::Nucleic => TokenKind::Nucleic,
        TokenClass::Special => TokenKind::Special,
    }
}

fn encode_segment(
    sequence: &str,
    residue_offset: usize,
    class: TokenClass,
    vocab: &Vocab,
) -> Result<(Vec<u32>, Vec<(usize, usize)>), TokenizerError> {
    let part = vocab.partition(class);
    let id_of: HashMap<&str, u32> = part
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), vocab.base_id(class) + i as u32))
        .collect();

    let mut symbols: Vec<(String, (usize, usize))> = Vec::with_capacity(sequence.len());
    for (pos, ch) in sequence.chars().enumerate() {
        let s = ch.to_string();
        if !id_of.contains_key(s.as_str()) {
            return Err(TokenizerError::OutOfAlphabet {
                ch,
                pos,
                class,
            });
        }
        symbols.push((s, (residue_offset + pos, residue_offset + pos + 1)));
    }

    for (l, r) in &part.merges {
        let mut out: Vec<(String, (usize, usize))> = Vec::with_capacity(symbols.len());
        let mut i = 0;
        while i < symbols.len() {
            if i + 1 < symbols.len() && symbols[i].0 == *l && symbols[i + 1].0 == *r {
                let span = (symbols[i].1 .0, symbols[i + 1].1 .1);
                out.push((format!("{l}{r}"), span));
                i += 2;
            } else {
                out.push(symbols[i].clone());
                i += 1;
            }
        }
        symbols = out;
    }

    let mut ids = Vec::with_capacity(symbols.len());
    let mut spans = Vec::with_capacity(symbols.len());
    for (tok, span) in symbols {
        ids.push(id_of[tok.as_str()]);
        spans.push(span);
    }
    Ok((ids, spans))
}

/// Concatenate non-special token strings back to the residue string.
pub fn decode(tokens: &TokenSeq, vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in &tokens.ids {
        if vocab.class_of(id)? != TokenClass::Special {
            out.push_str(vocab.token_string(id)?);
        }
    }
    Ok(out)
}

/// Pack a binding pair as [CLS] protein [SEP] na1 ([SEP] na2)?. Residue
/// spans index into the concatenation protein + na1 + na2. Overflowing
/// `max_len` is an error; truncation would corrupt supervision.
pub fn encode_pair(
    pair: &BindingPair,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSeq, TokenizerError> {
    let mut ids = vec![CLS];
    let mut spans = vec![(0, 0)];
    let mut kinds = vec![TokenKind::Special];

    let mut offset = 0usize;
    let push_segment = |seq: &SeqRecord,
                            ids: &mut Vec<u32>,
                            spans: &mut Vec<(usize, usize)>,
                            kinds: &mut Vec<TokenKind>,
                            offset: &mut usize|
     -> Result<(), TokenizerError> {
        let class = TokenClass::of_modality(seq.modality);
        let (seg_ids, seg_spans) = encode_segment(&seq.sequence, *offset, class, vocab)?;
        kinds.extend(std::iter::repeat(kind_of(class)).take(seg_ids.len()));
        ids.extend(seg_ids);
        spans.extend(seg_spans);
        *offset += seq.sequence.len();
        Ok(())
    };

    push_segment(&pair.protein, &mut ids, &mut spans, &mut kinds, &mut offset)?;
    ids.push(SEP);
    spans.push((offset, offset));
    kinds.push(TokenKind::Special);
    push_segment(&pair.na1, &mut ids, &mut spans, &mut kinds, &mut offset)?;
    if let Some(na2) = &pair.na2 {
        ids.push(SEP);
        spans.push((offset, offset));
        kinds.push(TokenKind::Special);
        push_segment(na2, &mut ids, &mut spans, &mut kinds, &mut offset)?;
    }

    if ids.len() > max_len {
        return Err(TokenizerError::Overflow {
            len: ids.len(),
            max_len,
        });
    }
    Ok(TokenSeq {
        ids,
        residue_spans: spans,
        kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::Modality;

    fn rec(id: &str, m: Modality, s: &str) -> SeqRecord {
        SeqRecord::new(id, m, s).unwrap()
    }

    #[test]
    fn bpe_merges_match_spec_example() {
        let corpus = vec![
            rec("a", Modality::Protein, "AAAA"),
            rec("b", Modality::Protein, "AAAA"),
        ];
        let part = train_bpe(&corpus, TokenClass::Protein, 3, 0).unwrap();
        assert_eq!(
            part.merges,
            vec![
                ("A".to_string(), "A".to_string()),
                ("AA".to_string(), "AA".to_string())
            ]
        );
        assert_eq!(part.tokens, vec!["A", "AA", "AAAA"]);
        assert!(!part.exhausted);
    }

    #[test]
    fn target_equal_alphabet_means_no_merges() {
        let corpus = vec![rec("a", Modality::Dna, "ACGT")];
        let part = train_bpe(&corpus, TokenClass::Nucleic, 4, 0).unwrap();
        assert!(part.merges.is_empty());
        assert_eq!(part.tokens.len(), 4);
    }

    #[test]
    fn exhaustion_sets_warning_flag() {
        let corpus = vec![rec("a", Modality::Protein, "AC")];
        let part = train_bpe(&corpus, TokenClass::Protein, 10, 0).unwrap();
        assert!(part.exhausted);
        assert!(part.tokens.len() < 10);
        // one merge possible: ("A","B"), then the sequence is one token
        assert_eq!(part.merges, vec![("A".to_string(), "C".to_string())]);
    }

    #[test]
    fn per_character_encode_spans() {
        let vocab = Vocab::per_character();
        let ts = encode(&rec("x", Modality::Dna, "ACGT"), &vocab).unwrap();
        assert_eq!(ts.ids.len(), 4);
        assert_eq!(ts.residue_spans, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(decode(&ts, &vocab).unwrap(), "ACGT");
    }

    #[test]
    fn merged_encode_collapses_to_one_token() {
        let corpus = vec![
            rec("a", Modality::Protein, "AAAA"),
            rec("b", Modality::Protein, "AAAA"),
        ];
        let protein = train_bpe(&corpus, TokenClass::Protein, 3, 0).unwrap();
        let vocab = Vocab::new(protein, BpePartition::per_character(TokenClass::Nucleic)).unwrap();
        let ts = encode(&rec("x", Modality::Protein, "AAAA"), &vocab).unwrap();
        assert_eq!(ts.ids.len(), 1);
        assert_eq!(vocab.token_string(ts.ids[0]).unwrap(), "AAAA");
        assert_eq!(ts.residue_spans, vec![(0, 4)]);
    }

    #[test]
    fn out_of_alphabet_names_position() {
        let vocab = Vocab::per_character();
        let bad = SeqRecord {
            id: "x".to_string(),
            modality: Modality::Protein,
            sequence: "MKX".to_string(),
        };
        match encode(&bad, &vocab) {
            Err(TokenizerError::OutOfAlphabet { ch: 'X', pos: 2, .. }) => {}
            other => panic!("expected out-of-alphabet at 2, got {other:?}"),
        }
    }

    #[test]
    fn pair_layout_and_overflow() {
        let vocab = Vocab::per_character();
        let pair = BindingPair::new(
            rec("p", Modality::Protein, "MK"),
            rec("n", Modality::Dna, "AC"),
            None,
            None,
        )
        .unwrap();
        let ts = encode_pair(&pair, &vocab, 16).unwrap();
        assert_eq!(ts.ids[0], CLS);
        assert_eq!(ts.ids[3], SEP);
        assert_eq!(ts.ids.len(), 6);
        assert_eq!(ts.kinds[1], TokenKind::Protein);
        assert_eq!(ts.kinds[4], TokenKind::Nucleic);
        assert_eq!(decode(&ts, &vocab).unwrap(), "MKAC");

        assert!(matches!(
            encode_pair(&pair, &vocab, 5),
            Err(TokenizerError::Overflow { len: 6, max_len: 5 })
        ));
    }

    #[test]
    fn double_stranded_pair_has_two_sep_segments() {
        let vocab = Vocab::per_character();
        let pair = BindingPair::new(
            rec("p", Modality::Protein, "MK"),
            rec("n1", Modality::Dna, "AC"),
            Some(rec("n2", Modality::Dna, "GT")),
            None,
        )
        .unwrap();
        let ts = encode_pair(&pair, &vocab, 16).unwrap();
        let seps: Vec<usize> = ts
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == SEP)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(seps, vec![3, 6]);
        assert_eq!(decode(&ts, &vocab).unwrap(), "MKACGT");
    }

    #[test]
    fn vocab_text_roundtrip_is_identity() {
        let corpus = vec![
            rec("a", Modality::Protein, "MKVMKVMKV"),
            rec("b", Modality::Dna, "ACGTACGTAC"),
        ];
        let prot = train_bpe(&corpus, TokenClass::Protein, 6, 0).unwrap();
        let nuc = train_bpe(&corpus, TokenClass::Nucleic, 7, 0).unwrap();
        let vocab = Vocab::new(prot, nuc).unwrap();
        let text = vocab.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.protein.tokens, vocab.protein.tokens);
        assert_eq!(back.nucleic.merges, vocab.nucleic.merges);
    }

    #[test]
    fn determinism_identical_serialized_bytes() {
        let corpus: Vec<SeqRecord> = (0..8)
            .map(|i| rec(&format!("s{i}"), Modality::Protein, "MKVWMKVWAAMK"))
            .collect();
        let a = train_bpe(&corpus, TokenClass::Protein, 12, 1).unwrap();
        let b = train_bpe(&corpus, TokenClass::Protein, 12, 1).unwrap();
        let va = Vocab::new(a, BpePartition::per_character(TokenClass::Nucleic)).unwrap();
        let vb = Vocab::new(b, BpePartition::per_character(TokenClass::Nucleic)).unwrap();
        assert_eq!(va.to_text(), vb.to_text());
    }

    #[test]
    fn cross_modal_token_rejected() {
        let bad = BpePartition {
            tokens: vec!["M".to_string(), "MU".to_string()],
            merges: vec![],
            exhausted: false,
        };
        assert!(Vocab::new(bad, BpePartition::per_character(TokenClass::Nucleic)).is_err());
    }
}
