//! Stage one: per-word start/end boundary classification and candidate pairing.
//!
//! A linear layer over each word's first-subtoken hidden row gives two-class start
//! logits; a separate linear layer gives two-class end logits over the word rows plus
//! the sentinel row. Every decoded start is paired with every decoded end that lies
//! within the length limit.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{spans_to_boundary_labels, BoundaryLabels, Dataset, Sentence, Span};
use crate::encoder::{EncodeError, Encoder, EncoderOutput, Mode};
use crate::nn::tape::PROB_CLAMP;
use crate::nn::{softmax_row, AdamW, OptimConfig, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Cross-entropy weights for the negative and positive class; sum to one.
    pub class_weights: [f64; 2],
    pub decode_threshold: f64,
    pub length_limit: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            class_weights: [0.5, 0.5],
            decode_threshold: 0.5,
            length_limit: 6,
            epochs: 3,
            optim: OptimConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), String> {
        let [neg, pos] = self.class_weights;
        if !(neg > 0.0 && pos > 0.0) {
            return Err("stage1.class_weights must both be positive".into());
        }
        if ((neg + pos) - 1.0).abs() > 1e-9 {
            return Err("stage1.class_weights must sum to 1".into());
        }
        if !(self.decode_threshold > 0.0 && self.decode_threshold < 1.0) {
            return Err("stage1.decode_threshold must lie in (0, 1)".into());
        }
        if self.length_limit == 0 {
            return Err("stage1.length_limit must be at least 1".into());
        }
        self.optim.validate("stage1.optim")
    }
}

/// Start probability per word; end probability per word plus the sentinel slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryScores {
    pub start_prob: Vec<f64>,
    pub end_prob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCandidate {
    pub span: Span,
    pub start_prob: f64,
    pub end_prob: f64,
}

/// Mean over slots of `-w[y] * ln(clamp(p_y))`, where `positive_prob[i]` is the
/// probability of label 1.
pub fn weighted_binary_ce(positive_prob: &[f64], labels: &[bool], weights: [f64; 2]) -> f64 {
    assert_eq!(positive_prob.len(), labels.len(), "score/label length mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = positive_prob
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p_true = if y { p } else { 1.0 - p };
            -weights[y as usize] * p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
        })
        .sum();
    total / labels.len() as f64
}

/// Start term plus end term, each a mean over its slots.
pub fn stage1_loss(scores: &BoundaryScores, labels: &BoundaryLabels, config: &Stage1Config) -> f64 {
    weighted_binary_ce(&scores.start_prob, &labels.start, config.class_weights)
        + weighted_binary_ce(&scores.end_prob, &labels.end, config.class_weights)
}

/// All `(i, j)` with `start_prob[i] >= threshold`, `end_prob[j] >= threshold` and
/// `0 < j - i <= length_limit`, sorted by span.
pub fn decode_and_pair(scores: &BoundaryScores, config: &Stage1Config) -> Vec<RegionCandidate> {
    let t = config.decode_threshold;
    let starts: Vec<usize> = (0..scores.start_prob.len())
        .filter(|&i| scores.start_prob[i] >= t)
        .collect();
    let ends: Vec<usize> = (0..scores.end_prob.len())
        .filter(|&j| scores.end_prob[j] >= t)
        .collect();
    let mut out = Vec::new();
    for &i in &starts {
        for &j in &ends {
            if j > i && j - i <= config.length_limit {
                out.push(RegionCandidate {
                    span: Span::new(i, j),
                    start_prob: scores.start_prob[i],
                    end_prob: scores.end_prob[j],
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub matched_candidates: usize,
    pub candidates: usize,
    pub recalled_regions: usize,
    pub gold_regions: usize,
}

/// Type-blind exact-region precision and recall. `candidates[k]` belongs to the
/// `k`-th sentence of `dataset`.
pub fn region_metrics(candidates: &[Vec<Span>], dataset: &Dataset) -> RegionMetrics {
    assert_eq!(candidates.len(), dataset.len(), "one candidate list per sentence");
    let mut matched = 0;
    let mut total = 0;
    let mut recalled = 0;
    let mut gold_total = 0;
    for (cands, sentence) in candidates.iter().zip(dataset.sentences()) {
        let gold: BTreeSet<(usize, usize)> = sentence.gold().iter().map(Span::region).collect();
        let predicted: BTreeSet<(usize, usize)> = cands.iter().map(Span::region).collect();
        total += predicted.len();
        matched += predicted.intersection(&gold).count();
        gold_total += gold.len();
        recalled += gold.iter().filter(|g| predicted.contains(g)).count();
    }
    let precision = if total == 0 {
        if gold_total > 0 {
            0.0
        } else {
            1.0
        }
    } else {
        matched as f64 / total as f64
    };
    let recall = if gold_total == 0 {
        1.0
    } else {
        recalled as f64 / gold_total as f64
    };
    RegionMetrics {
        precision,
        recall,
        matched_candidates: matched,
        candidates: total,
        recalled_regions: recalled,
        gold_regions: gold_total,
    }
}

/// Parameters of the two boundary heads.
#[derive(Debug, Clone)]
pub struct BoundaryHeads {
    pub start_weight: ParamId,
    pub start_bias: ParamId,
    pub end_weight: ParamId,
    pub end_bias: ParamId,
}

impl BoundaryHeads {
    pub fn new(store: &mut ParamStore, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            start_weight: store.push_glorot("stage1.start.weight", hidden_dim, 2, rng),
            start_bias: store.push_zeros("stage1.start.bias", 1, 2),
            end_weight: store.push_glorot("stage1.end.weight", hidden_dim, 2, rng),
            end_bias: store.push_zeros("stage1.end.bias", 1, 2),
        }
    }

    /// `(start_logits: n x 2, end_logits: (n + 1) x 2)` from encoder rows. Only
    /// first-subtoken rows and the sentinel row are read.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hidden: Var,
        sentence: &Sentence,
    ) -> (Var, Var) {
        let word_rows: Vec<usize> = (0..sentence.len()).map(|w| sentence.slot_row(w)).collect();
        let end_rows: Vec<usize> = (0..=sentence.len()).map(|w| sentence.slot_row(w)).collect();
        let starts = tape.gather_rows(hidden, &word_rows);
        let ends = tape.gather_rows(hidden, &end_rows);
        let ws = tape.param(store, self.start_weight);
        let bs = tape.param(store, self.start_bias);
        let we = tape.param(store, self.end_weight);
        let be = tape.param(store, self.end_bias);
        let s = tape.matmul(starts, ws);
        let s = tape.add_row(s, bs);
        let e = tape.matmul(ends, we);
        let e = tape.add_row(e, be);
        (s, e)
    }
}

fn positive_probs(logits: &ndarray::Array2<f64>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| softmax_row(&[r[0], r[1]])[1])
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Encoder plus boundary heads, with all parameters in one store.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub params: ParamStore,
    pub encoder: Encoder,
    pub heads: BoundaryHeads,
}

impl Stage1Model {
    /// Boundary scores from precomputed hidden states.
    pub fn score_encoded(&self, encoded: &EncoderOutput, sentence: &Sentence) -> BoundaryScores {
        let mut tape = Tape::new();
        let h = tape.constant(encoded.hidden.clone());
        let (s, e) = self.heads.logits(&mut tape, &self.params, h, sentence);
        BoundaryScores {
            start_prob: positive_probs(tape.value(s)),
            end_prob: positive_probs(tape.value(e)),
        }
    }

    pub fn score_boundaries(&self, sentence: &Sentence) -> Result<BoundaryScores, EncodeError> {
        let encoded = self.encoder.encode(&self.params, sentence)?;
        Ok(self.score_encoded(&encoded, sentence))
    }

    pub fn propose(
        &self,
        sentence: &Sentence,
        config: &Stage1Config,
    ) -> Result<Vec<RegionCandidate>, EncodeError> {
        Ok(decode_and_pair(&self.score_boundaries(sentence)?, config))
    }

    /// Batch loss on a fresh tape: weighted start cross-entropy averaged over every
    /// start slot in the batch, plus the same for end slots.
    pub fn batch_loss(
        &self,
        store: &ParamStore,
        batch: &[&Sentence],
        config: &Stage1Config,
        mode: &mut Mode<'_>,
    ) -> Result<(Tape, Var), EncodeError> {
        let mut tape = Tape::new();
        let mut start_parts = Vec::new();
        let mut end_parts = Vec::new();
        let mut start_targets = Vec::new();
        let mut end_targets = Vec::new();
        for sentence in batch {
            let hidden = self.encoder.encode_on(&mut tape, store, sentence, mode)?;
            let (s, e) = self.heads.logits(&mut tape, store, hidden, sentence);
            start_parts.push(s);
            end_parts.push(e);
            let labels = spans_to_boundary_labels(sentence);
            start_targets.extend(labels.start.iter().map(|&b| b as usize));
            end_targets.extend(labels.end.iter().map(|&b| b as usize));
        }
        let w = config.class_weights;
        let start_all = tape.concat_rows(&start_parts);
        let end_all = tape.concat_rows(&end_parts);
        let sw: Vec<f64> = start_targets.iter().map(|&t| w[t]).collect();
        let ew: Vec<f64> = end_targets.iter().map(|&t| w[t]).collect();
        let ls = tape.cross_entropy(start_all, &start_targets, &sw);
        let le = tape.cross_entropy(end_all, &end_targets, &ew);
        let ls = tape.scale(ls, 1.0 / start_targets.len() as f64);
        let le = tape.scale(le, 1.0 / end_targets.len() as f64);
        let total = tape.sum(&[ls, le]);
        Ok((tape, total))
    }

    /// Trains on every sentence of `dataset` for `config.epochs` epochs with shuffled
    /// mini-batches. Returns the mean batch loss per epoch.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        config: &Stage1Config,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EpochLoss>, EncodeError> {
        let mut optimizer = AdamW::new(config.optim.clone(), self.params.len());
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(rng);
            let mut losses = Vec::new();
            for chunk in order.chunks(config.optim.batch_size) {
                let batch: Vec<&Sentence> = chunk.iter().map(|&i| &dataset.sentences()[i]).collect();
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::gen(rng));
                let (tape, loss) =
                    self.batch_loss(&self.params, &batch, config, &mut Mode::Train(&mut dropout_rng))?;
                let grads = tape.backward(loss, self.params.len());
                optimizer.step(&mut self.params, &grads);
                losses.push(tape.scalar(loss));
            }
            let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            log::info!("stage1 epoch {} loss {mean_loss:.6}", epoch + 1);
            history.push(EpochLoss {
                epoch: epoch + 1,
                mean_loss,
            });
        }
        Ok(history)
    }
}

/// One line of the candidate dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub sentence_id: usize,
    pub candidates: Vec<CandidateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub start: usize,
    pub end: usize,
    pub start_prob: f64,
    pub end_prob: f64,
}

impl CandidateRecord {
    pub fn new(sentence_id: usize, candidates: &[RegionCandidate]) -> Self {
        Self {
            sentence_id,
            candidates: candidates
                .iter()
                .map(|c| CandidateEntry {
                    start: c.span.start,
                    end: c.span.end,
                    start_prob: c.start_prob,
                    end_prob: c.end_prob,
                })
                .collect(),
        }
    }

    pub fn to_candidates(&self) -> Vec<RegionCandidate> {
        self.candidates
            .iter()
            .map(|c| RegionCandidate {
                span: Span::new(c.start, c.end),
                start_prob: c.start_prob,
                end_prob: c.end_prob,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WHITESPACE;
    use crate::encoder::{EncoderConfig, ToyEncoder, Vocabulary};
    use ndarray::array;

    fn scores_from_sets(n: usize, starts: &[usize], ends: &[usize]) -> BoundaryScores {
        BoundaryScores {
            start_prob: (0..n).map(|i| if starts.contains(&i) { 0.9 } else { 0.1 }).collect(),
            end_prob: (0..=n).map(|j| if ends.contains(&j) { 0.9 } else { 0.1 }).collect(),
        }
    }

    fn spans(c: &[RegionCandidate]) -> Vec<(usize, usize)> {
        c.iter().map(|c| c.span.region()).collect()
    }

    #[test]
    fn pairs_respect_length_limit() {
        let cfg = Stage1Config {
            length_limit: 3,
            ..Stage1Config::default()
        };
        let out = decode_and_pair(&scores_from_sets(6, &[1, 4], &[3, 5]), &cfg);
        assert_eq!(spans(&out), [(1, 3), (4, 5)]);
        assert!(decode_and_pair(&scores_from_sets(6, &[], &[3, 5]), &cfg).is_empty());
        let out = decode_and_pair(&scores_from_sets(4, &[0], &[2]), &Stage1Config::default());
        assert_eq!(spans(&out), [(0, 2)]);
        assert_eq!(out[0].start_prob, 0.9);
    }

    #[test]
    fn uniform_probabilities_give_half_ln2_per_term() {
        let scores = BoundaryScores {
            start_prob: vec![0.5; 4],
            end_prob: vec![0.5; 5],
        };
        let labels = BoundaryLabels {
            start: vec![true, false, false, true],
            end: vec![false, true, false, false, true],
        };
        let per_term = 0.5 * std::f64::consts::LN_2;
        assert!((weighted_binary_ce(&scores.start_prob, &labels.start, [0.5, 0.5]) - per_term).abs() < 1e-12);
        assert!((stage1_loss(&scores, &labels, &Stage1Config::default()) - 2.0 * per_term).abs() < 1e-12);
    }

    #[test]
    fn perfect_probabilities_hit_clamp_floor() {
        let loss = weighted_binary_ce(&[1.0, 0.0], &[true, false], [0.5, 0.5]);
        assert!(loss > 0.0 && loss < 1e-7);
    }

    #[test]
    fn class_weighted_two_slot_example() {
        let loss = weighted_binary_ce(&[0.9, 0.2], &[true, false], [0.3, 0.7]);
        let expected = (0.7 * -(0.9f64.ln()) + 0.3 * -(0.8f64.ln())) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn region_metrics_count_exact_regions() {
        let s = Sentence::new(
            0,
            (0..6).map(|i| i.to_string()).collect(),
            vec![Span::typed(0, 2, "A")],
            &WHITESPACE,
        )
        .unwrap();
        let d = Dataset::new(vec![s]);
        let m = region_metrics(&[vec![Span::new(0, 2), Span::new(3, 5)]], &d);
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        let m = region_metrics(&[vec![Span::new(0, 2)]], &d);
        assert_eq!((m.precision, m.recall), (1.0, 1.0));
        let m = region_metrics(&[vec![]], &d);
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
    }

    fn one_word_model() -> (Stage1Model, Sentence) {
        let sentence = Sentence::new(0, vec!["x".into()], vec![], &WHITESPACE).unwrap();
        let cfg = EncoderConfig {
            hidden_dim: 2,
            layers: 0,
            max_len: 4,
            ..EncoderConfig::default()
        };
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ToyEncoder::new(&cfg, Vocabulary::new(["x".to_string()]), &mut params, "enc", &mut rng);
        let heads = BoundaryHeads::new(&mut params, 2, &mut rng);
        (
            Stage1Model {
                params,
                encoder: Encoder::Toy(enc),
                heads,
            },
            sentence,
        )
    }

    #[test]
    fn hand_set_weights_give_softmax_of_hand_logits() {
        let (mut model, sentence) = one_word_model();
        *model.params.value_mut(model.heads.start_weight) = array![[1.0, -1.0], [0.5, 2.0]];
        *model.params.value_mut(model.heads.start_bias) = array![[0.1, -0.2]];
        let encoded = EncoderOutput {
            hidden: array![[0.3, 0.4], [1.0, -1.0]],
        };
        let scores = model.score_encoded(&encoded, &sentence);
        // logits for the word row: [0.3 + 0.2 + 0.1, -0.3 + 0.8 - 0.2] = [0.6, 0.3]
        let expected = 0.3f64.exp() / (0.6f64.exp() + 0.3f64.exp());
        assert!((scores.start_prob[0] - expected).abs() < 1e-12);
        assert_eq!(scores.end_prob.len(), 2);
    }

    #[test]
    fn start_and_end_heads_are_independent() {
        let (mut model, sentence) = one_word_model();
        let before = model.score_boundaries(&sentence).unwrap();
        model.params.value_mut(model.heads.start_weight)[[0, 1]] += 3.0;
        let after = model.score_boundaries(&sentence).unwrap();
        assert_eq!(before.end_prob, after.end_prob);
        assert_ne!(before.start_prob, after.start_prob);
    }

    #[test]
    fn shapes_follow_word_count_not_subtokens() {
        let (model, _) = one_word_model();
        let s = Sentence::new(
            1,
            vec!["xy".into(), "x".into()],
            vec![],
            &crate::corpus::ChunkTokenizer { chunk: 1 },
        )
        .unwrap();
        let scores = model.score_boundaries(&s).unwrap();
        assert_eq!(s.subtokens().len(), 3);
        assert_eq!((scores.start_prob.len(), scores.end_prob.len()), (2, 3));
    }
}
