//! Contextual subtoken encoders.
//!
//! An encoder maps a sentence's subtokens to a `(n_subtokens + 1) x hidden_dim`
//! matrix. The extra last row is a sentinel that stands for "just past the final
//! word"; stage one predicts end boundaries of sentence-final entities there.
//!
//! [`ToyEncoder`] is a small trainable model: token and position embeddings followed by
//! residual self-attention layers. [`PrecomputedEncoder`] is the seam for pretrained
//! encoders: it serves frozen hidden states that were computed elsewhere.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Sentence};
use crate::nn::{Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("sentence {id} has {needed} rows including the sentinel, encoder maximum is {max}")]
    TooLong { id: usize, needed: usize, max: usize },
    #[error("no precomputed hidden states for sentence {0}")]
    Missing(usize),
    #[error("precomputed hidden states: {0}")]
    Invalid(String),
}

/// Training mode carries the dropout random stream; evaluation mode is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Inverted dropout with drop probability `p`; identity in evaluation mode.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let shape = tape.value(x).raw_dim();
                let mask = Array2::from_shape_simple_fn(shape, || {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
            _ => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Maximum rows, sentinel included.
    pub max_len: usize,
    pub dropout: f64,
    /// Hidden-state file for [`EncoderKind::External`].
    pub external_path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Toy,
    External,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            hidden_dim: 32,
            layers: 2,
            max_len: 128,
            dropout: 0.1,
            external_path: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 {
            return Err("encoder.hidden_dim must be at least 1".into());
        }
        if self.max_len < 2 {
            return Err("encoder.max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("encoder.dropout must lie in [0, 1)".into());
        }
        if self.kind == EncoderKind::External && self.external_path.is_none() {
            return Err("encoder.external_path is required for the external encoder".into());
        }
        Ok(())
    }
}

pub const UNK: &str = "[UNK]";

/// Subtoken vocabulary; index 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![UNK.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != UNK));
        let mut v = Self {
            tokens: all,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        let set: BTreeSet<String> = dataset
            .sentences()
            .iter()
            .flat_map(|s| s.subtokens().iter().cloned())
            .collect();
        Self::new(set)
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }
}

/// Embeddings plus residual self-attention layers:
/// `x <- x + relu(softmax(q k^T / sqrt(d)) v w_o + b_o)`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    hidden_dim: usize,
    max_len: usize,
    dropout: f64,
    vocab: Vocabulary,
    token_embedding: ParamId,
    position_embedding: ParamId,
    sentinel: ParamId,
    layers: Vec<AttentionLayer>,
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    output_bias: ParamId,
}

impl ToyEncoder {
    pub fn new(
        config: &EncoderConfig,
        vocab: Vocabulary,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.hidden_dim;
        let token_embedding =
            store.push_uniform(format!("{prefix}.token_embedding"), vocab.len(), d, 0.5, rng);
        let position_embedding =
            store.push_uniform(format!("{prefix}.position_embedding"), config.max_len, d, 0.1, rng);
        let sentinel = store.push_uniform(format!("{prefix}.sentinel"), 1, d, 0.5, rng);
        let layers = (0..config.layers)
            .map(|l| AttentionLayer {
                query: store.push_glorot(format!("{prefix}.layer{l}.query"), d, d, rng),
                key: store.push_glorot(format!("{prefix}.layer{l}.key"), d, d, rng),
                value: store.push_glorot(format!("{prefix}.layer{l}.value"), d, d, rng),
                output: store.push_glorot(format!("{prefix}.layer{l}.output"), d, d, rng),
                output_bias: store.push_uniform(format!("{prefix}.layer{l}.output_bias"), 1, d, 0.1, rng),
            })
            .collect();
        Self {
            hidden_dim: d,
            max_len: config.max_len,
            dropout: config.dropout,
            vocab,
            token_embedding,
            position_embedding,
            sentinel,
            layers,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &Sentence,
        mode: &mut Mode<'_>,
    ) -> Result<Var, EncodeError> {
        let n = sentence.subtokens().len();
        if n + 1 > self.max_len {
            return Err(EncodeError::TooLong {
                id: sentence.id(),
                needed: n + 1,
                max: self.max_len,
            });
        }
        let ids: Vec<usize> = sentence.subtokens().iter().map(|t| self.vocab.id(t)).collect();
        let table = tape.param(store, self.token_embedding);
        let tokens = tape.gather_rows(table, &ids);
        let sentinel = tape.param(store, self.sentinel);
        let stacked = tape.concat_rows(&[tokens, sentinel]);
        let positions = tape.param(store, self.position_embedding);
        let rows: Vec<usize> = (0..=n).collect();
        let pos = tape.gather_rows(positions, &rows);
        let mut x = tape.add(stacked, pos);
        x = mode.dropout(tape, x, self.dropout);

        let scale = 1.0 / (self.hidden_dim as f64).sqrt();
        for layer in &self.layers {
            let wq = tape.param(store, layer.query);
            let wk = tape.param(store, layer.key);
            let wv = tape.param(store, layer.value);
            let wo = tape.param(store, layer.output);
            let bo = tape.param(store, layer.output_bias);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            let mixed = tape.matmul(attn, v);
            let projected = tape.matmul(mixed, wo);
            let projected = tape.add_row(projected, bo);
            let update = tape.relu(projected);
            let update = mode.dropout(tape, update, self.dropout);
            x = tape.add(x, update);
        }
        Ok(x)
    }
}

/// Frozen hidden states computed by an external encoder, looked up by the exact
/// subtoken sequence. File format: JSON lines of
/// `{"subtokens": [...], "hidden": [[f64; dim]; n_subtokens + 1]}`.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEncoder {
    dim: usize,
    table: HashMap<Vec<String>, Matrix>,
}

#[derive(Deserialize)]
struct HiddenRecord {
    subtokens: Vec<String>,
    hidden: Vec<Vec<f64>>,
}

impl PrecomputedEncoder {
    pub fn insert(&mut self, subtokens: Vec<String>, hidden: Matrix) -> Result<(), EncodeError> {
        if hidden.nrows() != subtokens.len() + 1 {
            return Err(EncodeError::Invalid(format!(
                "{} rows for {} subtokens (expected one extra sentinel row)",
                hidden.nrows(),
                subtokens.len()
            )));
        }
        if self.table.is_empty() {
            self.dim = hidden.ncols();
        } else if hidden.ncols() != self.dim {
            return Err(EncodeError::Invalid(format!(
                "hidden width {} differs from {}",
                hidden.ncols(),
                self.dim
            )));
        }
        if !hidden.iter().all(|v| v.is_finite()) {
            return Err(EncodeError::Invalid("non-finite hidden state".into()));
        }
        self.table.insert(subtokens, hidden);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EncodeError::Invalid(format!("{}: {e}", path.display())))?;
        let mut enc = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: HiddenRecord = serde_json::from_str(line)
                .map_err(|e| EncodeError::Invalid(format!("line {}: {e}", i + 1)))?;
            let rows = rec.hidden.len();
            let cols = rec.hidden.first().map_or(0, Vec::len);
            let flat: Vec<f64> = rec.hidden.into_iter().flatten().collect();
            let m = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| EncodeError::Invalid(format!("line {}: {e}", i + 1)))?;
            enc.insert(rec.subtokens, m)?;
        }
        Ok(enc)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Toy(ToyEncoder),
    External(PrecomputedEncoder),
}

/// Hidden states for one sentence: `(n_subtokens + 1) x hidden_dim`, sentinel last.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Matrix,
}

impl EncoderOutput {
    pub fn rows(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn dim(&self) -> usize {
        self.hidden.ncols()
    }
}

impl Encoder {
    pub fn hidden_dim(&self) -> usize {
        match self {
            Encoder::Toy(t) => t.hidden_dim,
            Encoder::External(e) => e.dim,
        }
    }

    pub fn vocab(&self) -> Option<&Vocabulary> {
        match self {
            Encoder::Toy(t) => Some(&t.vocab),
            Encoder::External(_) => None,
        }
    }

    /// Hidden rows for `sentence` on `tape`.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &Sentence,
        mode: &mut Mode<'_>,
    ) -> Result<Var, EncodeError> {
        match self {
            Encoder::Toy(t) => t.encode(tape, store, sentence, mode),
            Encoder::External(e) => {
                let m = e
                    .table
                    .get(sentence.subtokens())
                    .ok_or(EncodeError::Missing(sentence.id()))?;
                Ok(tape.constant(m.clone()))
            }
        }
    }

    /// Evaluation-mode encoding.
    pub fn encode(&self, store: &ParamStore, sentence: &Sentence) -> Result<EncoderOutput, EncodeError> {
        let mut tape = Tape::new();
        let v = self.encode_on(&mut tape, store, sentence, &mut Mode::Eval)?;
        Ok(EncoderOutput {
            hidden: tape.value(v).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Span, WHITESPACE};
    use rand::SeedableRng;

    fn sentence(words: &[&str]) -> Sentence {
        Sentence::new(
            0,
            words.iter().map(|w| w.to_string()).collect(),
            Vec::<Span>::new(),
            &WHITESPACE,
        )
        .unwrap()
    }

    fn toy(seed: u64) -> (Encoder, ParamStore) {
        let vocab = Vocabulary::new(["a", "b", "c", "d", "e", "f"].map(String::from));
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ToyEncoder::new(&EncoderConfig::default(), vocab, &mut store, "enc", &mut rng);
        (Encoder::Toy(enc), store)
    }

    #[test]
    fn output_has_sentinel_row() {
        let (enc, store) = toy(1);
        let out = enc.encode(&store, &sentence(&["a", "b", "c", "d", "e"])).unwrap();
        assert_eq!(out.hidden.dim(), (6, 32));
        assert!(out.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (enc, store) = toy(1);
        let s = sentence(&["a", "b", "c"]);
        assert_eq!(enc.encode(&store, &s).unwrap(), enc.encode(&store, &s).unwrap());
        let (enc2, store2) = toy(1);
        assert_eq!(enc.encode(&store, &s).unwrap(), enc2.encode(&store2, &s).unwrap());
    }

    #[test]
    fn changing_one_token_changes_output() {
        let (enc, store) = toy(2);
        let a = enc.encode(&store, &sentence(&["a", "b", "c", "d"])).unwrap();
        let b = enc.encode(&store, &sentence(&["a", "b", "f", "d"])).unwrap();
        let differing = a
            .hidden
            .rows()
            .into_iter()
            .zip(b.hidden.rows())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing >= 1);
    }

    #[test]
    fn overlong_sentence_is_rejected() {
        let vocab = Vocabulary::new(Vec::<String>::new());
        let mut store = ParamStore::default();
        let cfg = EncoderConfig {
            max_len: 4,
            ..EncoderConfig::default()
        };
        let enc = Encoder::Toy(ToyEncoder::new(
            &cfg,
            vocab,
            &mut store,
            "enc",
            &mut ChaCha8Rng::seed_from_u64(0),
        ));
        assert!(enc.encode(&store, &sentence(&["a", "b", "c"])).is_ok());
        assert!(matches!(
            enc.encode(&store, &sentence(&["a", "b", "c", "d"])),
            Err(EncodeError::TooLong { needed: 5, max: 4, .. })
        ));
    }

    #[test]
    fn dropout_only_in_training() {
        let (enc, store) = toy(3);
        let s = sentence(&["a", "b", "c"]);
        let eval = enc.encode(&store, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let v = enc
            .encode_on(&mut tape, &store, &s, &mut Mode::Train(&mut rng))
            .unwrap();
        assert_ne!(tape.value(v), &eval.hidden);
    }

    #[test]
    fn precomputed_encoder_serves_frozen_rows() {
        let mut pre = PrecomputedEncoder::default();
        let s = sentence(&["x", "y"]);
        let hidden = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64);
        pre.insert(s.subtokens().to_vec(), hidden.clone()).unwrap();
        assert!(pre.insert(vec!["z".into()], Array2::zeros((1, 4))).is_err());
        let enc = Encoder::External(pre);
        let out = enc.encode(&ParamStore::default(), &s).unwrap();
        assert_eq!(out.hidden, hidden);
        assert!(matches!(
            enc.encode(&ParamStore::default(), &sentence(&["q"])),
            Err(EncodeError::Missing(_))
        ));
    }
}
