//! Stage two: re-scoring region candidates.
//!
//! For each candidate span the model produces four outputs:
//!
//! * start and end boundary logits from multi-head dot products between the two
//!   tokens on either side of each boundary,
//! * entityness logits from a row-wise dense layer, max pooling over the span's word
//!   rows, and a dense layer over the pooled features concatenated with the four
//!   boundary logits,
//! * type logits from a head of the same shape with its own weights and no boundary
//!   inputs.
//!
//! Training minimises `alpha * (L_start + L_end) + beta * L_entityness + L_type`,
//! where the first three are batch-mean two-class cross-entropies and `L_type` is the
//! categorical cross-entropy of true entities summed and divided by the full batch
//! size.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Sentence, Span};
use crate::encoder::{EncodeError, Encoder, Mode};
use crate::nn::tape::PROB_CLAMP;
use crate::nn::{softmax_row, AdamW, OptimConfig, ParamId, ParamStore, Tape, Var};
use crate::region_proposal::EpochLoss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub alpha: f64,
    pub beta: f64,
    pub n_heads: usize,
    /// Projection width of each dot-product head.
    pub head_dim: usize,
    pub feat_dim: usize,
    pub entityness_threshold: f64,
    pub random_negatives_per_sentence: usize,
    pub overlap_type_loss_weight: f64,
    /// Minimum intersection-over-union for the overlap type loss.
    pub overlap_iou_threshold: f64,
    /// Add every gold span as a training example even when stage one missed it.
    pub inject_gold: bool,
    /// Drop the boundary units: no start/end loss and no boundary logits in the
    /// entityness input.
    pub disable_boundary_heads: bool,
    /// Use only the first word row of a span instead of max pooling.
    pub disable_max_pool: bool,
    /// Multiplier on `n_heads` and `feat_dim`.
    pub channel_scale: f64,
    /// Feed softmax probabilities instead of raw boundary logits to entityness.
    pub boundary_probabilities: bool,
    pub epochs_flat: usize,
    pub epochs_nested: usize,
    pub optim: OptimConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            n_heads: 32,
            head_dim: 8,
            feat_dim: 64,
            entityness_threshold: 0.5,
            random_negatives_per_sentence: 1,
            overlap_type_loss_weight: 0.0,
            overlap_iou_threshold: 0.5,
            inject_gold: true,
            disable_boundary_heads: false,
            disable_max_pool: false,
            channel_scale: 1.0,
            boundary_probabilities: false,
            epochs_flat: 3,
            epochs_nested: 10,
            optim: OptimConfig::default(),
        }
    }
}

pub const CHANNEL_SCALES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

impl Stage2Config {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err("stage2.alpha and stage2.beta must be non-negative".into());
        }
        if self.n_heads == 0 || self.head_dim == 0 || self.feat_dim == 0 {
            return Err("stage2.n_heads, stage2.head_dim and stage2.feat_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.entityness_threshold) {
            return Err("stage2.entityness_threshold must lie in [0, 1]".into());
        }
        if !(self.overlap_type_loss_weight >= 0.0) {
            return Err("stage2.overlap_type_loss_weight must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_iou_threshold) {
            return Err("stage2.overlap_iou_threshold must lie in [0, 1]".into());
        }
        if !CHANNEL_SCALES.contains(&self.channel_scale) {
            return Err(format!("stage2.channel_scale must be one of {CHANNEL_SCALES:?}"));
        }
        self.optim.validate("stage2.optim")
    }

    pub fn effective_heads(&self) -> usize {
        ((self.n_heads as f64 * self.channel_scale).round() as usize).max(1)
    }

    pub fn effective_feat_dim(&self) -> usize {
        ((self.feat_dim as f64 * self.channel_scale).round() as usize).max(1)
    }
}

/// The four targets of one stage-two example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Labels {
    pub start_correct: bool,
    pub end_correct: bool,
    pub is_entity: bool,
    #[serde(rename = "type")]
    pub label: Option<String>,
}

impl Stage2Labels {
    pub fn is_consistent(&self) -> bool {
        if self.is_entity {
            self.start_correct && self.end_correct && self.label.is_some()
        } else {
            self.label.is_none()
        }
    }
}

pub fn label_example(span: &Span, gold: &[Span]) -> Stage2Labels {
    let exact = gold.iter().find(|g| g.same_region(span));
    Stage2Labels {
        start_correct: gold.iter().any(|g| g.start == span.start),
        end_correct: gold.iter().any(|g| g.end == span.end),
        is_entity: exact.is_some(),
        label: exact.and_then(|g| g.label.clone()),
    }
}

/// Gold span with the largest intersection with `span`, ties to the leftmost start
/// (then the shortest end). `None` when nothing overlaps.
pub fn max_overlap_gold<'a>(span: &Span, gold: &'a [Span]) -> Option<&'a Span> {
    gold.iter()
        .filter(|g| g.overlaps(span))
        .min_by_key(|g| (std::cmp::Reverse(g.intersection(span)), g.start, g.end))
}

/// Type target for the optional overlap loss: a non-exact span whose max-overlap
/// gold reaches `iou_threshold`.
pub fn overlap_target(span: &Span, gold: &[Span], iou_threshold: f64) -> Option<String> {
    if gold.iter().any(|g| g.same_region(span)) {
        return None;
    }
    let g = max_overlap_gold(span, gold)?;
    if g.iou(span) >= iou_threshold {
        g.label.clone()
    } else {
        None
    }
}

/// `weight * ce`; the quantity the overlap loss adds to the type-loss sum.
pub fn overlap_type_loss(cross_entropy: f64, weight: f64) -> f64 {
    weight * cross_entropy
}

/// Up to `count` spans of length `1..=length_limit`, uniformly without replacement,
/// that are neither an existing candidate nor a gold region.
pub fn sample_random_negatives(
    sentence: &Sentence,
    candidates: &BTreeSet<(usize, usize)>,
    count: usize,
    length_limit: usize,
    rng: &mut impl Rng,
) -> Vec<Span> {
    let gold: BTreeSet<(usize, usize)> = sentence.gold().iter().map(Span::region).collect();
    let n = sentence.len();
    let allowed = (0..n)
        .flat_map(|s| (s + 1..=(s + length_limit).min(n)).map(move |e| (s, e)))
        .filter(|r| !candidates.contains(r) && !gold.contains(r));
    let mut picked = allowed.choose_multiple(rng, count);
    picked.sort_unstable();
    picked.into_iter().map(|(s, e)| Span::new(s, e)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSource {
    Candidate,
    RandomNegative,
    InjectedGold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Example {
    /// Position of the sentence in its dataset.
    pub sentence: usize,
    pub span: Span,
    pub labels: Stage2Labels,
    /// Type target of the optional overlap loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_type: Option<String>,
    pub source: ExampleSource,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleCounts {
    pub total: usize,
    pub candidates: usize,
    pub random_negatives: usize,
    pub injected_gold: usize,
    pub entities: usize,
    pub non_entities: usize,
    pub start_correct: usize,
    pub end_correct: usize,
}

impl ExampleCounts {
    pub fn of(examples: &[Stage2Example]) -> Self {
        let mut c = Self {
            total: examples.len(),
            ..Self::default()
        };
        for e in examples {
            match e.source {
                ExampleSource::Candidate => c.candidates += 1,
                ExampleSource::RandomNegative => c.random_negatives += 1,
                ExampleSource::InjectedGold => c.injected_gold += 1,
            }
            if e.labels.is_entity {
                c.entities += 1;
            } else {
                c.non_entities += 1;
            }
            c.start_correct += e.labels.start_correct as usize;
            c.end_correct += e.labels.end_correct as usize;
        }
        c
    }
}

/// Stage-two training examples: stage-one candidates, then random negatives drawn
/// per sentence from a stream seeded by `(seed, sentence position)`, then gold spans
/// the candidates missed (when `inject_gold` is on).
pub fn build_examples(
    dataset: &Dataset,
    candidates: &[Vec<Span>],
    config: &Stage2Config,
    length_limit: usize,
    seed: u64,
) -> Vec<Stage2Example> {
    assert_eq!(candidates.len(), dataset.len());
    let mut out = Vec::new();
    for (idx, (sentence, cands)) in dataset.sentences().iter().zip(candidates).enumerate() {
        let gold = sentence.gold();
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut push = |span: Span, source: ExampleSource, out: &mut Vec<Stage2Example>| {
            let span = span.untyped();
            if !seen.insert(span.region()) {
                return;
            }
            let overlap_type = if config.overlap_type_loss_weight > 0.0 {
                overlap_target(&span, gold, config.overlap_iou_threshold)
            } else {
                None
            };
            out.push(Stage2Example {
                sentence: idx,
                labels: label_example(&span, gold),
                span,
                overlap_type,
                source,
            });
        };
        for c in cands {
            push(c.clone(), ExampleSource::Candidate, &mut out);
        }
        let existing: BTreeSet<(usize, usize)> = cands.iter().map(Span::region).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        for neg in sample_random_negatives(
            sentence,
            &existing,
            config.random_negatives_per_sentence,
            length_limit,
            &mut rng,
        ) {
            push(neg, ExampleSource::RandomNegative, &mut out);
        }
        if config.inject_gold {
            for g in gold {
                push(g.clone(), ExampleSource::InjectedGold, &mut out);
            }
        }
    }
    out
}

/// Raw logits for one span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Output {
    pub start_logits: [f64; 2],
    pub end_logits: [f64; 2],
    pub entityness_logits: [f64; 2],
    pub type_logits: Vec<f64>,
}

impl Stage2Output {
    pub fn entityness_prob(&self) -> f64 {
        softmax_row(&self.entityness_logits)[1]
    }

    pub fn type_probs(&self) -> Vec<f64> {
        softmax_row(&self.type_logits)
    }

    /// Index and probability of the most likely type; ties go to the lower index.
    pub fn best_type(&self) -> (usize, f64) {
        let probs = self.type_probs();
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        (best, probs[best])
    }
}

/// Per-term values of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub start: f64,
    pub end: f64,
    pub entityness: f64,
    pub type_: f64,
    pub total: f64,
}

/// `alpha * (start + end) + beta * entityness + type_`.
pub fn combine_loss(start: f64, end: f64, entityness: f64, type_: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (start + end) + beta * entityness + type_
}

fn clamped_nll(probs: &[f64], target: usize) -> f64 {
    -probs[target].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

/// Composite loss evaluated directly from logits. `type_index` maps type names to
/// rows of `type_logits`.
pub fn stage2_loss(
    batch: &[(&Stage2Example, &Stage2Output)],
    type_index: &BTreeMap<String, usize>,
    config: &Stage2Config,
) -> LossBreakdown {
    let n = batch.len();
    if n == 0 {
        return LossBreakdown::default();
    }
    let mut b = LossBreakdown::default();
    for (ex, out) in batch {
        let l = &ex.labels;
        b.start += clamped_nll(&softmax_row(&out.start_logits), l.start_correct as usize);
        b.end += clamped_nll(&softmax_row(&out.end_logits), l.end_correct as usize);
        b.entityness += clamped_nll(&softmax_row(&out.entityness_logits), l.is_entity as usize);
        let probs = out.type_probs();
        if l.is_entity {
            let t = type_index[l.label.as_deref().expect("entity has a type")];
            b.type_ += clamped_nll(&probs, t);
        } else if let Some(target) = &ex.overlap_type {
            if config.overlap_type_loss_weight > 0.0 {
                b.type_ += overlap_type_loss(clamped_nll(&probs, type_index[target]), config.overlap_type_loss_weight);
            }
        }
    }
    let n = n as f64;
    b.start /= n;
    b.end /= n;
    b.entityness /= n;
    b.type_ /= n;
    let alpha = if config.disable_boundary_heads { 0.0 } else { config.alpha };
    if config.disable_boundary_heads {
        b.start = 0.0;
        b.end = 0.0;
    }
    b.total = combine_loss(b.start, b.end, b.entityness, b.type_, alpha, config.beta);
    b
}

/// Multi-head dot products across one boundary followed by a dense layer to two
/// logits. Head `h` projects the left row with `left[:, h*k..(h+1)*k]` and the right
/// row with `right[:, h*k..(h+1)*k]`; its feature is the dot product of the two.
#[derive(Debug, Clone)]
pub struct BoundaryUnit {
    pub left: ParamId,
    pub right: ParamId,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl BoundaryUnit {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden_dim: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            left: store.push_glorot(format!("{prefix}.left"), hidden_dim, n_heads * head_dim, rng),
            right: store.push_glorot(format!("{prefix}.right"), hidden_dim, n_heads * head_dim, rng),
            fc_weight: store.push_glorot(format!("{prefix}.fc.weight"), n_heads, 2, rng),
            fc_bias: store.push_zeros(format!("{prefix}.fc.bias"), 1, 2),
            n_heads,
            head_dim,
        }
    }

    /// `m x n_heads` dot-product features for `m` (left, right) row pairs.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, left: Var, right: Var) -> Var {
        let wl = tape.param(store, self.left);
        let wr = tape.param(store, self.right);
        let pl = tape.matmul(left, wl);
        let pr = tape.matmul(right, wr);
        let prod = tape.mul(pl, pr);
        let k = self.head_dim;
        let group = Array2::from_shape_fn((self.n_heads * k, self.n_heads), |(i, h)| {
            if i / k == h {
                1.0
            } else {
                0.0
            }
        });
        let group = tape.constant(group);
        tape.matmul(prod, group)
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, left: Var, right: Var) -> Var {
        let f = self.features(tape, store, left, right);
        let w = tape.param(store, self.fc_weight);
        let b = tape.param(store, self.fc_bias);
        let out = tape.matmul(f, w);
        tape.add_row(out, b)
    }
}

/// Row-wise dense + ReLU, pooling over each span's rows, optional concatenation with
/// auxiliary features, then a dense layer to `n_out` logits.
#[derive(Debug, Clone)]
pub struct SpanHead {
    pub row_weight: ParamId,
    pub row_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

impl SpanHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden_dim: usize,
        feat_dim: usize,
        aux_dim: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            row_weight: store.push_glorot(format!("{prefix}.row.weight"), hidden_dim, feat_dim, rng),
            row_bias: store.push_uniform(format!("{prefix}.row.bias"), 1, feat_dim, 0.1, rng),
            out_weight: store.push_glorot(format!("{prefix}.out.weight"), feat_dim + aux_dim, n_out, rng),
            out_bias: store.push_zeros(format!("{prefix}.out.bias"), 1, n_out),
        }
    }

    /// `words`: one hidden row per word. `ranges`: word ranges to pool over.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        words: Var,
        ranges: &[(usize, usize)],
        aux: Option<Var>,
    ) -> Var {
        let w1 = tape.param(store, self.row_weight);
        let b1 = tape.param(store, self.row_bias);
        let h = tape.matmul(words, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let pooled = tape.range_max(h, ranges);
        let input = match aux {
            Some(a) => tape.concat_cols(&[pooled, a]),
            None => pooled,
        };
        let w2 = tape.param(store, self.out_weight);
        let b2 = tape.param(store, self.out_bias);
        let out = tape.matmul(input, w2);
        tape.add_row(out, b2)
    }
}

/// Tape handles for the outputs of a group of spans in one sentence.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Vars {
    pub start: Option<Var>,
    pub end: Option<Var>,
    pub entityness: Var,
    pub types: Var,
}

#[derive(Debug, Clone)]
pub struct Stage2Net {
    pub begin_of_sentence: ParamId,
    pub start_unit: Option<BoundaryUnit>,
    pub end_unit: Option<BoundaryUnit>,
    pub entityness_head: SpanHead,
    pub type_head: SpanHead,
    pub types: Vec<String>,
    pub type_index: BTreeMap<String, usize>,
    disable_max_pool: bool,
    boundary_probabilities: bool,
}

impl Stage2Net {
    pub fn new(
        store: &mut ParamStore,
        hidden_dim: usize,
        types: &[String],
        config: &Stage2Config,
        rng: &mut impl Rng,
    ) -> Self {
        let heads = config.effective_heads();
        let feat = config.effective_feat_dim();
        let with_boundary = !config.disable_boundary_heads;
        let begin_of_sentence = store.push_uniform("stage2.begin_of_sentence", 1, hidden_dim, 0.5, rng);
        let start_unit = with_boundary
            .then(|| BoundaryUnit::new(store, "stage2.start_unit", hidden_dim, heads, config.head_dim, rng));
        let end_unit = with_boundary
            .then(|| BoundaryUnit::new(store, "stage2.end_unit", hidden_dim, heads, config.head_dim, rng));
        let aux = if with_boundary { 4 } else { 0 };
        let entityness_head = SpanHead::new(store, "stage2.entityness", hidden_dim, feat, aux, 2, rng);
        let type_head = SpanHead::new(store, "stage2.type", hidden_dim, feat, 0, types.len(), rng);
        Self {
            begin_of_sentence,
            start_unit,
            end_unit,
            entityness_head,
            type_head,
            types: types.to_vec(),
            type_index: types.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            disable_max_pool: config.disable_max_pool,
            boundary_probabilities: config.boundary_probabilities,
        }
    }

    /// Outputs for `spans` of `sentence`, given the sentence's encoder rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hidden: Var,
        sentence: &Sentence,
        spans: &[Span],
    ) -> Stage2Vars {
        // Row 0 is the begin-of-sentence row; encoder row r moves to r + 1.
        let bos = tape.param(store, self.begin_of_sentence);
        let extended = tape.concat_rows(&[bos, hidden]);
        let row = |slot: usize| 1 + sentence.slot_row(slot);

        let (start, end) = match (&self.start_unit, &self.end_unit) {
            (Some(su), Some(eu)) => {
                let sl: Vec<usize> = spans
                    .iter()
                    .map(|s| if s.start == 0 { 0 } else { row(s.start - 1) })
                    .collect();
                let sr: Vec<usize> = spans.iter().map(|s| row(s.start)).collect();
                let el: Vec<usize> = spans.iter().map(|s| row(s.end - 1)).collect();
                let er: Vec<usize> = spans.iter().map(|s| row(s.end)).collect();
                let l = tape.gather_rows(extended, &sl);
                let r = tape.gather_rows(extended, &sr);
                let start = su.logits(tape, store, l, r);
                let l = tape.gather_rows(extended, &el);
                let r = tape.gather_rows(extended, &er);
                let end = eu.logits(tape, store, l, r);
                (Some(start), Some(end))
            }
            _ => (None, None),
        };

        let word_rows: Vec<usize> = (0..sentence.len()).map(row).collect();
        let words = tape.gather_rows(extended, &word_rows);
        let ranges: Vec<(usize, usize)> = spans
            .iter()
            .map(|s| {
                if self.disable_max_pool {
                    (s.start, s.start + 1)
                } else {
                    (s.start, s.end)
                }
            })
            .collect();
        let aux = match (start, end) {
            (Some(s), Some(e)) if self.boundary_probabilities => {
                let sp = tape.softmax_rows(s);
                let ep = tape.softmax_rows(e);
                Some(tape.concat_cols(&[sp, ep]))
            }
            (Some(s), Some(e)) => Some(tape.concat_cols(&[s, e])),
            _ => None,
        };
        let entityness = self.entityness_head.logits(tape, store, words, &ranges, aux);
        let types = self.type_head.logits(tape, store, words, &ranges, None);
        Stage2Vars {
            start,
            end,
            entityness,
            types,
        }
    }

    pub fn read_outputs(&self, tape: &Tape, vars: &Stage2Vars) -> Vec<Stage2Output> {
        let ent = tape.value(vars.entityness);
        let ty = tape.value(vars.types);
        let pair = |v: Option<Var>, i: usize| -> [f64; 2] {
            v.map_or([0.0, 0.0], |v| {
                let m = tape.value(v);
                [m[[i, 0]], m[[i, 1]]]
            })
        };
        (0..ent.nrows())
            .map(|i| Stage2Output {
                start_logits: pair(vars.start, i),
                end_logits: pair(vars.end, i),
                entityness_logits: [ent[[i, 0]], ent[[i, 1]]],
                type_logits: ty.row(i).to_vec(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub params: ParamStore,
    pub encoder: Encoder,
    pub net: Stage2Net,
}

impl Stage2Model {
    /// Evaluation-mode outputs for `spans`.
    pub fn score(&self, sentence: &Sentence, spans: &[Span]) -> Result<Vec<Stage2Output>, EncodeError> {
        if spans.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let hidden = self.encoder.encode_on(&mut tape, &self.params, sentence, &mut Mode::Eval)?;
        let vars = self.net.forward(&mut tape, &self.params, hidden, sentence, spans);
        Ok(self.net.read_outputs(&tape, &vars))
    }

    /// Composite loss of `batch` on a fresh tape. Examples are grouped by sentence so
    /// each sentence is encoded once.
    pub fn batch_loss(
        &self,
        store: &ParamStore,
        dataset: &Dataset,
        batch: &[&Stage2Example],
        config: &Stage2Config,
        mode: &mut Mode<'_>,
    ) -> Result<(Tape, Var), EncodeError> {
        let mut tape = Tape::new();
        let mut groups: BTreeMap<usize, Vec<&Stage2Example>> = BTreeMap::new();
        for ex in batch {
            groups.entry(ex.sentence).or_default().push(ex);
        }
        let mut starts = Vec::new();
        let mut ends = Vec::new();
        let mut ents = Vec::new();
        let mut types = Vec::new();
        let mut ordered: Vec<&Stage2Example> = Vec::with_capacity(batch.len());
        for (idx, exs) in &groups {
            let sentence = &dataset.sentences()[*idx];
            let hidden = self.encoder.encode_on(&mut tape, store, sentence, mode)?;
            let spans: Vec<Span> = exs.iter().map(|e| e.span.clone()).collect();
            let v = self.net.forward(&mut tape, store, hidden, sentence, &spans);
            starts.extend(v.start);
            ends.extend(v.end);
            ents.push(v.entityness);
            types.push(v.types);
            ordered.extend(exs.iter().copied());
        }
        let n = ordered.len() as f64;
        let ones = vec![1.0; ordered.len()];
        let mut terms = Vec::new();

        if !config.disable_boundary_heads && !starts.is_empty() {
            let s_all = tape.concat_rows(&starts);
            let e_all = tape.concat_rows(&ends);
            let st: Vec<usize> = ordered.iter().map(|e| e.labels.start_correct as usize).collect();
            let et: Vec<usize> = ordered.iter().map(|e| e.labels.end_correct as usize).collect();
            let ls = tape.cross_entropy(s_all, &st, &ones);
            let le = tape.cross_entropy(e_all, &et, &ones);
            let boundary = tape.sum(&[ls, le]);
            terms.push(tape.scale(boundary, config.alpha / n));
        }

        let ent_all = tape.concat_rows(&ents);
        let targets: Vec<usize> = ordered.iter().map(|e| e.labels.is_entity as usize).collect();
        let lent = tape.cross_entropy(ent_all, &targets, &ones);
        terms.push(tape.scale(lent, config.beta / n));

        let type_all = tape.concat_rows(&types);
        let mut rows = Vec::new();
        let mut type_targets = Vec::new();
        let mut weights = Vec::new();
        for (i, e) in ordered.iter().enumerate() {
            if e.labels.is_entity {
                rows.push(i);
                type_targets.push(self.net.type_index[e.labels.label.as_deref().expect("entity has a type")]);
                weights.push(1.0);
            } else if let Some(t) = &e.overlap_type {
                if config.overlap_type_loss_weight > 0.0 {
                    rows.push(i);
                    type_targets.push(self.net.type_index[t.as_str()]);
                    weights.push(config.overlap_type_loss_weight);
                }
            }
        }
        if !rows.is_empty() {
            let picked = tape.gather_rows(type_all, &rows);
            let lt = tape.cross_entropy(picked, &type_targets, &weights);
            terms.push(tape.scale(lt, 1.0 / n));
        }
        let total = tape.sum(&terms);
        Ok((tape, total))
    }

    pub fn fit(
        &mut self,
        dataset: &Dataset,
        examples: &[Stage2Example],
        config: &Stage2Config,
        epochs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EpochLoss>, EncodeError> {
        let mut optimizer = AdamW::new(config.optim.clone(), self.params.len());
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(rng);
            let mut losses = Vec::new();
            for chunk in order.chunks(config.optim.batch_size) {
                let batch: Vec<&Stage2Example> = chunk.iter().map(|&i| &examples[i]).collect();
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let (tape, loss) = self.batch_loss(
                    &self.params,
                    dataset,
                    &batch,
                    config,
                    &mut Mode::Train(&mut dropout_rng),
                )?;
                let grads = tape.backward(loss, self.params.len());
                optimizer.step(&mut self.params, &grads);
                losses.push(tape.scalar(loss));
            }
            let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            log::info!("stage2 epoch {} loss {mean_loss:.6}", epoch + 1);
            history.push(EpochLoss {
                epoch: epoch + 1,
                mean_loss,
            });
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WHITESPACE;
    use crate::nn::Matrix;
    use ndarray::array;

    fn sentence(n: usize, gold: Vec<Span>) -> Sentence {
        Sentence::new(0, (0..n).map(|i| format!("w{i}")).collect(), gold, &WHITESPACE).unwrap()
    }

    #[test]
    fn labels_follow_gold_boundaries() {
        let gold = vec![Span::typed(1, 3, "PER")];
        let l = label_example(&Span::new(1, 3), &gold);
        assert_eq!((l.start_correct, l.end_correct, l.is_entity, l.label.as_deref()), (true, true, true, Some("PER")));
        let l = label_example(&Span::new(1, 4), &gold);
        assert_eq!((l.start_correct, l.end_correct, l.is_entity, l.label), (true, false, false, None));
        let gold = vec![Span::typed(1, 3, "PER"), Span::typed(3, 5, "ORG")];
        let l = label_example(&Span::new(0, 2), &gold);
        assert_eq!((l.start_correct, l.end_correct, l.is_entity), (false, false, false));
    }

    #[test]
    fn overlap_target_breaks_ties_leftmost() {
        let gold = vec![Span::typed(1, 3, "PER"), Span::typed(2, 6, "ORG")];
        assert_eq!(max_overlap_gold(&Span::new(1, 4), &gold).unwrap().label.as_deref(), Some("PER"));
        assert_eq!(overlap_target(&Span::new(1, 4), &gold, 0.5).as_deref(), Some("PER"));
        assert_eq!(overlap_target(&Span::new(1, 3), &gold, 0.5), None);
        assert_eq!(overlap_target(&Span::new(0, 1), &gold, 0.5), None);
    }

    #[test]
    fn overlap_loss_scales_cross_entropy() {
        assert_eq!(overlap_type_loss(1.5, 0.0), 0.0);
        assert!((overlap_type_loss(1.5, 0.2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn random_negative_comes_from_remaining_spans() {
        let s = sentence(4, vec![Span::typed(0, 2, "X")]);
        let cands: BTreeSet<_> = [(0, 2)].into_iter().collect();
        // all spans of length 1..=3 in 4 words
        let all: Vec<(usize, usize)> = (0..4)
            .flat_map(|a| (a + 1..=4).map(move |b| (a, b)))
            .filter(|(a, b)| b - a <= 3)
            .collect();
        assert_eq!(all.len(), 9);
        let allowed: BTreeSet<_> = all.into_iter().filter(|r| *r != (0, 2)).collect();
        assert_eq!(allowed.len(), 8);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = sample_random_negatives(&s, &cands, 1, 3, &mut rng);
            assert_eq!(got.len(), 1);
            assert!(allowed.contains(&got[0].region()));
        }
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            sample_random_negatives(&s, &cands, 2, 3, &mut a),
            sample_random_negatives(&s, &cands, 2, 3, &mut b)
        );
    }

    #[test]
    fn fully_covered_sentence_yields_no_negative() {
        let s = sentence(2, vec![Span::typed(0, 1, "X")]);
        let cands: BTreeSet<_> = [(0, 2), (1, 2)].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_random_negatives(&s, &cands, 1, 6, &mut rng).is_empty());
    }

    #[test]
    fn substitution_into_composite_loss() {
        assert!((combine_loss(0.2, 0.4, 0.3, 0.1, 0.5, 1.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn uniform_binary_heads_without_entities() {
        let ex = Stage2Example {
            sentence: 0,
            span: Span::new(0, 1),
            labels: Stage2Labels {
                start_correct: false,
                end_correct: true,
                is_entity: false,
                label: None,
            },
            overlap_type: None,
            source: ExampleSource::Candidate,
        };
        let out = Stage2Output {
            start_logits: [0.3, 0.3],
            end_logits: [-1.0, -1.0],
            entityness_logits: [2.0, 2.0],
            type_logits: vec![0.5, -0.2],
        };
        let idx: BTreeMap<String, usize> = [("A".to_string(), 0), ("B".to_string(), 1)].into();
        let b = stage2_loss(&[(&ex, &out), (&ex, &out)], &idx, &Stage2Config::default());
        assert_eq!(b.type_, 0.0);
        assert!((b.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn unit(hidden: usize, heads: usize, k: usize) -> (BoundaryUnit, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (BoundaryUnit::new(&mut store, "u", hidden, heads, k, &mut rng), store)
    }

    #[test]
    fn boundary_unit_has_one_feature_per_head() {
        let (u, store) = unit(6, 32, 4);
        let mut tape = Tape::new();
        let l = tape.constant(Array2::from_elem((3, 6), 0.2));
        let r = tape.constant(Array2::from_elem((3, 6), -0.1));
        let f = u.features(&mut tape, &store, l, r);
        assert_eq!(tape.value(f).dim(), (3, 32));
        let logits = u.logits(&mut tape, &store, l, r);
        assert_eq!(tape.value(logits).dim(), (3, 2));
    }

    #[test]
    fn orthogonal_projections_leave_only_bias() {
        let (u, mut store) = unit(2, 2, 1);
        *store.value_mut(u.left) = array![[1.0, 0.0], [0.0, 1.0]];
        *store.value_mut(u.right) = array![[0.0, 1.0], [1.0, 0.0]];
        *store.value_mut(u.fc_bias) = array![[0.25, -0.75]];
        let mut tape = Tape::new();
        // projections (1, 0) and (0, 1): every head multiplies a zero
        let l = tape.constant(array![[1.0, 0.0]]);
        let r = tape.constant(array![[1.0, 0.0]]);
        let f = u.features(&mut tape, &store, l, r);
        assert_eq!(tape.value(f), &array![[0.0, 0.0]]);
        let logits = u.logits(&mut tape, &store, l, r);
        assert_eq!(tape.value(logits), &array![[0.25, -0.75]]);
    }

    #[test]
    fn single_head_hand_computation() {
        let (u, mut store) = unit(2, 1, 2);
        *store.value_mut(u.left) = array![[1.0, 2.0], [0.0, 1.0]];
        *store.value_mut(u.right) = array![[0.5, 0.0], [1.0, -1.0]];
        *store.value_mut(u.fc_weight) = array![[2.0, -1.0]];
        *store.value_mut(u.fc_bias) = array![[0.1, 0.2]];
        let mut tape = Tape::new();
        let l = tape.constant(array![[1.0, 3.0]]);
        let r = tape.constant(array![[2.0, 1.0]]);
        // l·left = (1, 5); r·right = (2, -1); dot = 2 - 5 = -3
        let logits = u.logits(&mut tape, &store, l, r);
        assert_eq!(tape.value(logits), &array![[-6.0 + 0.1, 3.0 + 0.2]]);
    }

    fn head(aux: usize, n_out: usize) -> (SpanHead, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        (SpanHead::new(&mut store, "h", 3, 4, aux, n_out, &mut rng), store)
    }

    #[test]
    fn single_word_pooling_is_identity() {
        let (h, store) = head(0, 2);
        let mut tape = Tape::new();
        let words = tape.constant(array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]);
        let pooled = h.logits(&mut tape, &store, words, &[(1, 2)], None);
        let single = tape.constant(array![[1.0, -1.0, 0.5]]);
        let direct = h.logits(&mut tape, &store, single, &[(0, 1)], None);
        assert_eq!(tape.value(pooled), tape.value(direct));
    }

    #[test]
    fn pooling_ignores_row_order() {
        let (h, store) = head(4, 2);
        let rows = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [-0.4, 0.8, 0.0]];
        let permuted = array![[-0.4, 0.8, 0.0], [0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let aux = array![[0.3, -0.3, 1.0, 2.0]];
        let run = |m: Matrix| {
            let mut tape = Tape::new();
            let w = tape.constant(m);
            let a = tape.constant(aux.clone());
            let out = h.logits(&mut tape, &store, w, &[(0, 3)], Some(a));
            tape.value(out).clone()
        };
        assert_eq!(run(rows), run(permuted));
    }

    #[test]
    fn two_word_span_matches_hand_max() {
        let (h, mut store) = head(0, 1);
        *store.value_mut(h.row_weight) = array![[1.0, 0.0, 0.0, -1.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        *store.value_mut(h.row_bias) = array![[0.0, 0.0, 0.0, 0.0]];
        *store.value_mut(h.out_weight) = array![[1.0], [10.0], [100.0], [1000.0]];
        *store.value_mut(h.out_bias) = array![[0.5]];
        let mut tape = Tape::new();
        let words = tape.constant(array![[0.2, -0.5, 0.3], [0.7, 0.4, -0.1]]);
        let out = h.logits(&mut tape, &store, words, &[(0, 2)], None);
        // relu rows: [0.2, 0, 0.3, 0] and [0.7, 0.4, 0, 0]; max = [0.7, 0.4, 0.3, 0]
        let expected = 0.7 + 4.0 + 30.0 + 0.0 + 0.5;
        assert!((tape.value(out)[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn channel_scale_shrinks_heads_and_features() {
        let cfg = Stage2Config {
            channel_scale: 0.25,
            ..Stage2Config::default()
        };
        assert_eq!((cfg.effective_heads(), cfg.effective_feat_dim()), (8, 16));
        assert!(Stage2Config { channel_scale: 0.3, ..Stage2Config::default() }.validate().is_err());
    }
}
