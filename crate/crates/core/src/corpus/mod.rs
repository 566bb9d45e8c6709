//! Sentences, spans and datasets for flat and nested NER.
//!
//! Spans are half-open word intervals `[start, end)`. A sentence keeps both its word
//! sequence and the subtoken sequence produced by a [`SubwordTokenizer`]; models only
//! ever read the first subtoken of each word, so the alignment lives here.

mod conll;
mod jsonl;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conll::{decode_iob, encode_iob2, load_conll, parse_conll, write_conll, TagScheme};
pub use jsonl::{load_json_spans, parse_json_spans, write_json_spans};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid span ({start}, {end}) in a sentence of {n_words} words")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        n_words: usize,
    },
    #[error("region ({start}, {end}) is labelled with two types: {first} and {second}")]
    ConflictingTypes {
        start: usize,
        end: usize,
        first: String,
        second: String,
    },
    #[error("sentence has no words")]
    EmptySentence,
    #[error("type {0} is not in the type inventory")]
    UnknownType(String),
    #[error("overlapping spans cannot be written as IOB tags")]
    NotFlat,
}

/// Half-open word interval `[start, end)` with an optional entity type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            label: None,
        }
    }

    pub fn typed(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: Some(label.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn region(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn untyped(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn same_region(&self, other: &Span) -> bool {
        self.region() == other.region()
    }

    /// Number of words shared with `other`.
    pub fn intersection(&self, other: &Span) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.intersection(other) > 0
    }

    pub fn iou(&self, other: &Span) -> f64 {
        let inter = self.intersection(other);
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }

    pub fn is_valid_for(&self, n_words: usize) -> bool {
        self.start < self.end && self.end <= n_words
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.label {
            Some(l) => write!(f, "({}, {}, {l})", self.start, self.end),
            None => write!(f, "({}, {})", self.start, self.end),
        }
    }
}

/// Splits one word into subtokens.
pub trait SubwordTokenizer: Send + Sync {
    fn split(&self, word: &str) -> Vec<String>;
}

/// One word, one subtoken.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl SubwordTokenizer for WhitespaceTokenizer {
    fn split(&self, word: &str) -> Vec<String> {
        vec![word.to_string()]
    }
}

/// Cuts words into fixed-size character chunks, WordPiece style (`##` on trailing
/// pieces). Useful for exercising first-subtoken masking without a real vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct ChunkTokenizer {
    pub chunk: usize,
}

impl SubwordTokenizer for ChunkTokenizer {
    fn split(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        chars
            .chunks(self.chunk.max(1))
            .enumerate()
            .map(|(i, c)| {
                let piece: String = c.iter().collect();
                if i == 0 {
                    piece
                } else {
                    format!("##{piece}")
                }
            })
            .collect()
    }
}

pub static WHITESPACE: WhitespaceTokenizer = WhitespaceTokenizer;

/// Loader settings shared by both file formats.
#[derive(Clone, Copy)]
pub struct LoadOptions<'a> {
    pub tokenizer: &'a dyn SubwordTokenizer,
    /// Sentences with more subtokens than this are dropped with a warning.
    pub max_subtokens: Option<usize>,
    pub scheme: TagScheme,
}

impl Default for LoadOptions<'_> {
    fn default() -> Self {
        Self {
            tokenizer: &WHITESPACE,
            max_subtokens: None,
            scheme: TagScheme::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    id: usize,
    words: Vec<String>,
    subtokens: Vec<String>,
    word_starts: Vec<usize>,
    first_subtoken_mask: Vec<bool>,
    gold: Vec<Span>,
}

impl Sentence {
    /// Builds a sentence, tokenising each word and validating the gold spans.
    /// Identical `(start, end, type)` duplicates are collapsed; the same region with
    /// two different types is rejected.
    pub fn new(
        id: usize,
        words: Vec<String>,
        gold: Vec<Span>,
        tokenizer: &dyn SubwordTokenizer,
    ) -> Result<Self, CorpusError> {
        if words.is_empty() {
            return Err(CorpusError::EmptySentence);
        }
        let mut subtokens = Vec::new();
        let mut word_starts = Vec::with_capacity(words.len());
        let mut first_subtoken_mask = Vec::new();
        for w in &words {
            let mut pieces = tokenizer.split(w);
            if pieces.is_empty() {
                pieces.push(w.clone());
            }
            word_starts.push(subtokens.len());
            for (i, p) in pieces.into_iter().enumerate() {
                first_subtoken_mask.push(i == 0);
                subtokens.push(p);
            }
        }

        let n = words.len();
        let mut unique: BTreeSet<Span> = BTreeSet::new();
        for span in gold {
            if !span.is_valid_for(n) {
                return Err(CorpusError::SpanOutOfRange {
                    start: span.start,
                    end: span.end,
                    n_words: n,
                });
            }
            if !unique.insert(span.clone()) {
                log::warn!("sentence {id}: dropping duplicate gold span {span}");
            }
        }
        let gold: Vec<Span> = unique.into_iter().collect();
        for pair in gold.windows(2) {
            if pair[0].same_region(&pair[1]) {
                return Err(CorpusError::ConflictingTypes {
                    start: pair[0].start,
                    end: pair[0].end,
                    first: pair[0].label.clone().unwrap_or_default(),
                    second: pair[1].label.clone().unwrap_or_default(),
                });
            }
        }
        Ok(Self {
            id,
            words,
            subtokens,
            word_starts,
            first_subtoken_mask,
            gold,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn subtokens(&self) -> &[String] {
        &self.subtokens
    }

    pub fn word_starts(&self) -> &[usize] {
        &self.word_starts
    }

    pub fn first_subtoken_mask(&self) -> &[bool] {
        &self.first_subtoken_mask
    }

    /// Gold spans, sorted and free of duplicates.
    pub fn gold(&self) -> &[Span] {
        &self.gold
    }

    /// Subtoken row for word slot `slot`; `slot == len()` is the sentinel row that
    /// follows the last subtoken.
    pub fn slot_row(&self, slot: usize) -> usize {
        if slot == self.words.len() {
            self.subtokens.len()
        } else {
            self.word_starts[slot]
        }
    }

    pub fn has_overlapping_gold(&self) -> bool {
        self.gold
            .iter()
            .enumerate()
            .any(|(i, a)| self.gold[i + 1..].iter().any(|b| a.overlaps(b)))
    }

    fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }
}

/// An immutable collection of sentences with an ordered type inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    sentences: Vec<Sentence>,
    type_inventory: Vec<String>,
}

impl Dataset {
    /// Inventory is the sorted set of gold types.
    pub fn new(sentences: Vec<Sentence>) -> Self {
        let types: BTreeSet<String> = sentences
            .iter()
            .flat_map(|s| s.gold.iter().filter_map(|g| g.label.clone()))
            .collect();
        Self {
            sentences,
            type_inventory: types.into_iter().collect(),
        }
    }

    pub fn with_inventory(
        sentences: Vec<Sentence>,
        type_inventory: Vec<String>,
    ) -> Result<Self, CorpusError> {
        for s in &sentences {
            for g in &s.gold {
                if let Some(l) = &g.label {
                    if !type_inventory.contains(l) {
                        return Err(CorpusError::UnknownType(l.clone()));
                    }
                }
            }
        }
        Ok(Self {
            sentences,
            type_inventory,
        })
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn type_inventory(&self) -> &[String] {
        &self.type_inventory
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn gold_total(&self) -> usize {
        self.sentences.iter().map(|s| s.gold.len()).sum()
    }

    pub fn max_gold_len(&self) -> usize {
        self.sentences
            .iter()
            .flat_map(|s| s.gold.iter().map(Span::len))
            .max()
            .unwrap_or(0)
    }

    pub fn sentence_by_id(&self, id: usize) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    /// First `n` sentences and the rest, each renumbered from zero and keeping this
    /// dataset's inventory.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.sentences.len());
        let renumber = |ss: &[Sentence]| -> Vec<Sentence> {
            ss.iter()
                .enumerate()
                .map(|(i, s)| s.clone().with_id(i))
                .collect()
        };
        (
            Dataset {
                sentences: renumber(&self.sentences[..n]),
                type_inventory: self.type_inventory.clone(),
            },
            Dataset {
                sentences: renumber(&self.sentences[n..]),
                type_inventory: self.type_inventory.clone(),
            },
        )
    }
}

/// Per-slot boundary targets for stage one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryLabels {
    /// One entry per word.
    pub start: Vec<bool>,
    /// One entry per word plus a trailing sentinel slot.
    pub end: Vec<bool>,
}

/// Start label at each gold start word; end label at each gold exclusive end, which
/// lands on the word right after the entity or on the sentinel slot.
pub fn spans_to_boundary_labels(sentence: &Sentence) -> BoundaryLabels {
    let n = sentence.len();
    let mut start = vec![false; n];
    let mut end = vec![false; n + 1];
    for g in sentence.gold() {
        start[g.start] = true;
        end[g.end] = true;
    }
    BoundaryLabels { start, end }
}

/// Fraction of gold spans whose length is at most `limit`; 1.0 when there are none.
pub fn length_coverage(dataset: &Dataset, limit: usize) -> f64 {
    let total = dataset.gold_total();
    if total == 0 {
        return 1.0;
    }
    let covered = dataset
        .sentences()
        .iter()
        .flat_map(|s| s.gold())
        .filter(|g| g.len() <= limit)
        .count();
    covered as f64 / total as f64
}

/// Picks the loader by extension: `.jsonl`/`.json` are span records, anything else
/// is CoNLL.
pub fn load_dataset(
    path: &std::path::Path,
    options: &LoadOptions<'_>,
) -> Result<Dataset, CorpusError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => load_json_spans(path, options),
        _ => load_conll(path, options),
    }
}

fn keep_length(sentence: &Sentence, options: &LoadOptions<'_>) -> bool {
    match options.max_subtokens {
        Some(max) if sentence.subtokens().len() > max => {
            log::warn!(
                "dropping sentence {} with {} subtokens (limit {max})",
                sentence.id(),
                sentence.subtokens().len()
            );
            false
        }
        _ => true,
    }
}
