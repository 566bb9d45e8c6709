#![allow(dead_code)]

use std::collections::BTreeSet;

use proposal_ner::corpus::{Dataset, Sentence, Span, WHITESPACE};
use proposal_ner::encoder::Vocabulary;
use proposal_ner::pipeline::{build_stage1, build_stage2, EncoderSource, PipelineConfig};
use proposal_ner::region_proposal::Stage1Model;
use proposal_ner::stage2::{label_example, overlap_target, ExampleSource, Stage2Example, Stage2Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn sentence(id: usize, text: &str, gold: Vec<Span>) -> Sentence {
    Sentence::new(id, text.split(' ').map(String::from).collect(), gold, &WHITESPACE).unwrap()
}

/// Four sentences: a nested pair, two flat pairs and one without entities.
pub fn nested_corpus() -> Dataset {
    Dataset::new(vec![
        sentence(
            0,
            "The University of Oslo said",
            vec![Span::typed(1, 4, "ORG"), Span::typed(3, 4, "LOC")],
        ),
        sentence(1, "Maria Berg visited Paris", vec![Span::typed(0, 2, "PER"), Span::typed(3, 4, "LOC")]),
        sentence(2, "Rain fell", vec![]),
        sentence(3, "Acme hired John", vec![Span::typed(0, 1, "ORG"), Span::typed(2, 3, "PER")]),
    ])
}

/// Small dimensions so every parameter entry can be checked numerically.
pub fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.encoder.hidden_dim = 6;
    c.encoder.layers = 2;
    c.encoder.max_len = 16;
    c.encoder.dropout = 0.0;
    c.stage1.class_weights = [0.3, 0.7];
    c.stage2.n_heads = 3;
    c.stage2.head_dim = 2;
    c.stage2.feat_dim = 5;
    c
}

pub fn build(config: &PipelineConfig, data: &Dataset, seed: u64) -> (Stage1Model, Stage2Model) {
    let source = EncoderSource::Toy(Vocabulary::from_dataset(data));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1 = build_stage1(config, &source, &mut rng);
    let s2 = build_stage2(config, &source, data.type_inventory(), &s1, &mut rng);
    (s1, s2)
}

pub fn example(data: &Dataset, sentence: usize, start: usize, end: usize, overlap_iou: Option<f64>) -> Stage2Example {
    let span = Span::new(start, end);
    let gold = data.sentences()[sentence].gold();
    Stage2Example {
        sentence,
        labels: label_example(&span, gold),
        overlap_type: overlap_iou.and_then(|t| overlap_target(&span, gold, t)),
        span,
        source: ExampleSource::Candidate,
    }
}

/// Two entities (one nested inside a longer span), a start-edge negative and an
/// overlapping negative.
pub fn four_examples(data: &Dataset, overlap_iou: Option<f64>) -> Vec<Stage2Example> {
    vec![
        example(data, 0, 1, 4, overlap_iou),
        example(data, 0, 0, 2, overlap_iou),
        example(data, 1, 3, 4, overlap_iou),
        example(data, 1, 0, 3, overlap_iou),
    ]
}

/// Every span of length `1..=limit` whose start and end slots both clear the
/// threshold, enumerated by start and length.
pub fn brute_force_pairs(starts: &[f64], ends: &[f64], threshold: f64, limit: usize) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for (s, &ps) in starts.iter().enumerate() {
        for len in 1..=limit {
            let e = s + len;
            if e < ends.len() && ps >= threshold && ends[e] >= threshold {
                out.insert((s, e));
            }
        }
    }
    out
}

/// True positives, prediction count and gold count by plain set intersection.
pub fn brute_force_counts(predictions: &[Vec<Span>], data: &Dataset) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut pred = 0;
    let mut gold = 0;
    for (p, s) in predictions.iter().zip(data.sentences()) {
        let p: BTreeSet<Span> = p.iter().cloned().collect();
        let g: BTreeSet<Span> = s.gold().iter().cloned().collect();
        tp += p.intersection(&g).count();
        pred += p.len();
        gold += g.len();
    }
    (tp, pred, gold)
}
