//! Character-level byte-pair-encoding tokenizer.
//!
//! Ids `0..4` are reserved for PAD/BOS/EOS/UNK; learned pieces follow, so a
//! vocabulary trained with `vocab_size = n` has `n + 4` ids in total.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];
const MERGES_HEADER: &str = "#MERGES";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab size {requested} is smaller than the corpus alphabet; need at least {required}")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("corpus supports at most {available} pieces, {requested} requested")]
    CorpusExhausted { requested: usize, available: usize },
    #[error("token id {0} is out of range")]
    IdOutOfRange(usize),
    #[error("vocab file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Learned pieces; id of `pieces[i]` is `i + NUM_SPECIALS`.
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    piece_ids: HashMap<String, usize>,
    merge_ranks: HashMap<(String, String), usize>,
}

/// BOS-prefixed, EOS-terminated id sequence (for targets).
pub type TokenSequence = Vec<usize>;

impl Vocab {
    fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let piece_ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i + NUM_SPECIALS))
            .collect();
        let merge_ranks = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Self {
            pieces,
            merges,
            piece_ids,
            merge_ranks,
        }
    }

    /// Number of learned pieces (excludes specials).
    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// Total id space, specials included.
    pub fn len(&self) -> usize {
        self.pieces.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        if id < NUM_SPECIALS {
            Some(SPECIAL_NAMES[id])
        } else {
            self.pieces.get(id - NUM_SPECIALS).map(String::as_str)
        }
    }

    pub fn id_of(&self, piece: &str) -> Option<usize> {
        self.piece_ids.get(piece).copied()
    }

    pub fn encode(&self, s: &str, add_specials: bool) -> TokenSequence {
        let mut symbols: Vec<String> = s.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_pair(&symbols, left, right);
        }
        let mut ids = Vec::with_capacity(symbols.len() + 2);
        if add_specials {
            ids.push(BOS);
        }
        ids.extend(symbols.iter().map(|p| self.id_of(p).unwrap_or(UNK)));
        if add_specials {
            ids.push(EOS);
        }
        ids
    }

    /// Concatenates pieces, skipping specials and stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.len() {
                return Err(TokenizerError::IdOutOfRange(id));
            }
            if id == EOS {
                break;
            }
            if id < NUM_SPECIALS {
                continue;
            }
            out.push_str(&self.pieces[id - NUM_SPECIALS]);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in 0..self.len() {
            let _ = writeln!(out, "{id}\t{}", escape(self.piece(id).unwrap()));
        }
        out.push_str(MERGES_HEADER);
        out.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{}\t{}", escape(l), escape(r));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, msg: String| TokenizerError::Format { line: line + 1, msg };
        let mut pieces = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for (n, line) in text.lines().enumerate() {
            if line == MERGES_HEADER {
                in_merges = true;
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| err(n, "missing tab separator".into()))?;
            if in_merges {
                merges.push((unescape(a), unescape(b)));
                continue;
            }
            let id: usize = a.parse().map_err(|_| err(n, format!("bad id {a:?}")))?;
            let expected = pieces.len() + NUM_SPECIALS;
            if id < NUM_SPECIALS {
                if unescape(b) != SPECIAL_NAMES[id] {
                    return Err(err(n, format!("special id {id} must be {}", SPECIAL_NAMES[id])));
                }
                continue;
            }
            if id != expected {
                return Err(err(n, format!("expected id {expected}, found {id}")));
            }
            pieces.push(unescape(b));
        }
        if !in_merges {
            return Err(err(text.lines().count(), format!("missing {MERGES_HEADER} section")));
        }
        Ok(Self::from_parts(pieces, merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(o) => out.push(o),
            None => out.push('\\'),
        }
    }
    out
}

/// Learns a BPE vocabulary with exactly `vocab_size` pieces.
///
/// Starts from the character alphabet of `corpus` (sorted) and repeatedly
/// merges the most frequent adjacent pair; ties go to the lexicographically
/// smallest pair. A space only ever starts a piece, so merges stay inside
/// words until no in-word pair is left; after that pairs may span words.
pub fn train_tokenizer<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab, TokenizerError> {
    // identical strings are merged identically; count them once with weights
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in corpus {
        *counts.entry(s.as_ref()).or_default() += 1;
    }
    let mut words: Vec<(Vec<String>, usize)> = counts
        .into_iter()
        .map(|(s, n)| (s.chars().map(String::from).collect(), n))
        .collect();
    let mut alphabet: Vec<String> = words.iter().flat_map(|(w, _)| w.iter().cloned()).collect();
    alphabet.sort();
    alphabet.dedup();
    if vocab_size < alphabet.len() {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            required: alphabet.len(),
        });
    }
    let mut pieces = alphabet;
    let mut merges = Vec::new();
    let mut cross_words = false;
    while pieces.len() < vocab_size {
        let mut freq: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                if cross_words || !pair[1].starts_with(' ') {
                    *freq.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
                }
            }
        }
        if freq.is_empty() && !cross_words {
            cross_words = true;
            continue;
        }
        // max count, then smallest pair: BTreeMap iterates pairs in order
        let best = freq
            .iter()
            .fold(None::<(&(&str, &str), usize)>, |acc, (pair, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((pair, c)),
            })
            .map(|(p, _)| (p.0.to_string(), p.1.to_string()));
        let Some((l, r)) = best else {
            return Err(TokenizerError::CorpusExhausted {
                requested: vocab_size,
                available: pieces.len(),
            });
        };
        for (w, _) in &mut words {
            *w = merge_pair(w, &l, &r);
        }
        let merged = format!("{l}{r}");
        if !pieces.contains(&merged) {
            pieces.push(merged);
        }
        merges.push((l, r));
    }
    Ok(Vocab::from_parts(pieces, merges))
}
