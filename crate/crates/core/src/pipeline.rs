//! End-to-end training of both stages and thresholded inference.
//!
//! Inference scores every stage-one candidate independently, so the output may
//! contain overlapping and nested spans.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Sentence, Span};
use crate::encoder::{
    EncodeError, Encoder, EncoderConfig, EncoderKind, PrecomputedEncoder, ToyEncoder, Vocabulary,
};
use crate::nn::ParamStore;
use crate::region_proposal::{
    region_metrics, BoundaryHeads, EpochLoss, RegionCandidate, RegionMetrics, Stage1Config,
    Stage1Model,
};
use crate::stage2::{build_examples, ExampleCounts, Stage2Config, Stage2Model, Stage2Net};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training set has no gold entities, so stage two has no positive examples")]
    NoEntities,
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// Reuse the trained stage-one encoder, frozen, in stage two instead of training
    /// a second copy.
    pub share_encoder: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.encoder.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

/// Where encoder rows come from: a toy encoder over a vocabulary, or precomputed
/// hidden states.
#[derive(Debug, Clone)]
pub enum EncoderSource {
    Toy(Vocabulary),
    External(PrecomputedEncoder),
}

impl EncoderSource {
    pub fn for_training(config: &EncoderConfig, dataset: &Dataset) -> Result<Self, EncodeError> {
        match config.kind {
            EncoderKind::Toy => Ok(Self::Toy(Vocabulary::from_dataset(dataset))),
            EncoderKind::External => Self::external(config),
        }
    }

    pub fn external(config: &EncoderConfig) -> Result<Self, EncodeError> {
        let path = config
            .external_path
            .as_deref()
            .ok_or_else(|| EncodeError::Invalid("encoder.external_path is not set".into()))?;
        Ok(Self::External(PrecomputedEncoder::load(Path::new(path))?))
    }

    fn build(&self, config: &EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Encoder {
        match self {
            Self::Toy(vocab) => Encoder::Toy(ToyEncoder::new(config, vocab.clone(), store, prefix, rng)),
            Self::External(e) => Encoder::External(e.clone()),
        }
    }
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

pub fn build_stage1(config: &PipelineConfig, source: &EncoderSource, rng: &mut ChaCha8Rng) -> Stage1Model {
    let mut params = ParamStore::default();
    let encoder = source.build(&config.encoder, &mut params, "stage1.encoder", rng);
    let heads = BoundaryHeads::new(&mut params, encoder.hidden_dim(), rng);
    Stage1Model {
        params,
        encoder,
        heads,
    }
}

/// Untrained stage-two model. With `share_encoder` it starts from a frozen copy of
/// `stage1`'s parameters and reuses its encoder.
pub fn build_stage2(
    config: &PipelineConfig,
    source: &EncoderSource,
    types: &[String],
    stage1: &Stage1Model,
    rng: &mut ChaCha8Rng,
) -> Stage2Model {
    let (mut params, encoder) = if config.share_encoder {
        let mut params = stage1.params.clone();
        for id in params.ids().collect::<Vec<_>>() {
            params.set_trainable(id, false);
        }
        (params, stage1.encoder.clone())
    } else {
        let mut params = ParamStore::default();
        let encoder = source.build(&config.encoder, &mut params, "stage2.encoder", rng);
        (params, encoder)
    };
    let net = Stage2Net::new(&mut params, encoder.hidden_dim(), types, &config.stage2, rng);
    Stage2Model {
        params,
        encoder,
        net,
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub stage1: Stage1Model,
    pub stage2: Stage2Model,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub stage1_losses: Vec<EpochLoss>,
    pub stage2_losses: Vec<EpochLoss>,
    pub stage2_epochs: usize,
    /// Stage-one candidates against the training gold.
    pub region: RegionMetrics,
    pub examples: ExampleCounts,
}

pub fn train_stage1(
    dataset: &Dataset,
    config: &PipelineConfig,
    source: &EncoderSource,
    seed: u64,
) -> Result<(Stage1Model, Vec<EpochLoss>), PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut rng = stage_rng(seed, 1);
    let mut model = build_stage1(config, source, &mut rng);
    let losses = model.fit(dataset, &config.stage1, &mut rng)?;
    Ok((model, losses))
}

/// Stage-one candidate spans for every sentence of `dataset`, in order.
pub fn propose_all(
    stage1: &Stage1Model,
    dataset: &Dataset,
    config: &Stage1Config,
) -> Result<Vec<Vec<RegionCandidate>>, EncodeError> {
    dataset
        .sentences()
        .par_iter()
        .map(|s| stage1.propose(s, config))
        .collect()
}

/// Trains stage two on candidates from the finished `stage1`, plus random negatives
/// and injected gold.
pub fn train_stage2(
    dataset: &Dataset,
    config: &PipelineConfig,
    source: &EncoderSource,
    stage1: &Stage1Model,
    seed: u64,
) -> Result<(Stage2Model, TrainingReport), PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if dataset.gold_total() == 0 {
        return Err(PipelineError::NoEntities);
    }
    let candidates: Vec<Vec<Span>> = propose_all(stage1, dataset, &config.stage1)?
        .into_iter()
        .map(|c| c.into_iter().map(|c| c.span).collect())
        .collect();
    let region = region_metrics(&candidates, dataset);
    log::info!(
        "stage1 training regions: precision {:.4} recall {:.4} ({} candidates)",
        region.precision,
        region.recall,
        region.candidates
    );
    let examples = build_examples(dataset, &candidates, &config.stage2, config.stage1.length_limit, seed);
    let counts = ExampleCounts::of(&examples);
    if counts.entities == 0 {
        return Err(PipelineError::NoEntities);
    }
    let nested = dataset.sentences().iter().any(Sentence::has_overlapping_gold);
    let epochs = if nested {
        config.stage2.epochs_nested
    } else {
        config.stage2.epochs_flat
    };
    let mut rng = stage_rng(seed, 2);
    let mut model = build_stage2(config, source, dataset.type_inventory(), stage1, &mut rng);
    let losses = model.fit(dataset, &examples, &config.stage2, epochs, &mut rng)?;
    Ok((
        model,
        TrainingReport {
            stage1_losses: Vec::new(),
            stage2_losses: losses,
            stage2_epochs: epochs,
            region,
            examples: counts,
        },
    ))
}

pub fn train_end_to_end(
    dataset: &Dataset,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(TrainedModels, TrainingReport), PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let source = EncoderSource::for_training(&config.encoder, dataset)?;
    let (stage1, stage1_losses) = train_stage1(dataset, config, &source, seed)?;
    let (stage2, mut report) = train_stage2(dataset, config, &source, &stage1, seed)?;
    report.stage1_losses = stage1_losses;
    Ok((TrainedModels { stage1, stage2 }, report))
}

/// One scored span. Serialises as
/// `{"start", "end", "type", "entityness", "type_prob"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
    #[serde(rename = "entityness")]
    pub entityness_prob: f64,
    pub type_prob: f64,
}

impl Prediction {
    pub fn span(&self) -> Span {
        Span::typed(self.start, self.end, self.label.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePredictions {
    pub sentence_id: usize,
    pub predictions: Vec<Prediction>,
}

/// Every stage-one candidate of `sentence` with its entityness and best type, before
/// thresholding.
pub fn score_sentence(
    models: &TrainedModels,
    sentence: &Sentence,
    config: &PipelineConfig,
) -> Result<Vec<Prediction>, EncodeError> {
    let spans: Vec<Span> = models
        .stage1
        .propose(sentence, &config.stage1)?
        .into_iter()
        .map(|c| c.span)
        .collect();
    let outputs = models.stage2.score(sentence, &spans)?;
    Ok(spans
        .iter()
        .zip(outputs)
        .map(|(span, out)| {
            let (t, p) = out.best_type();
            Prediction {
                start: span.start,
                end: span.end,
                label: models.stage2.net.types[t].clone(),
                entityness_prob: out.entityness_prob(),
                type_prob: p,
            }
        })
        .collect())
}

/// Keeps scored spans with entityness at or above `threshold`; a region scored twice
/// keeps its higher-entityness entry. Sorted by region.
pub fn apply_threshold(scored: &[Prediction], threshold: f64) -> Vec<Prediction> {
    let mut best: BTreeMap<(usize, usize), &Prediction> = BTreeMap::new();
    for p in scored.iter().filter(|p| p.entityness_prob >= threshold) {
        best.entry((p.start, p.end))
            .and_modify(|b| {
                if p.entityness_prob > b.entityness_prob {
                    *b = p;
                }
            })
            .or_insert(p);
    }
    best.into_values().cloned().collect()
}

pub fn predict(
    models: &TrainedModels,
    sentence: &Sentence,
    config: &PipelineConfig,
) -> Result<Vec<Prediction>, EncodeError> {
    let scored = score_sentence(models, sentence, config)?;
    Ok(apply_threshold(&scored, config.stage2.entityness_threshold))
}

/// Unthresholded scores for a whole corpus, in sentence order.
pub fn score_corpus(
    models: &TrainedModels,
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<Vec<SentencePredictions>, EncodeError> {
    dataset
        .sentences()
        .par_iter()
        .map(|s| {
            Ok(SentencePredictions {
                sentence_id: s.id(),
                predictions: score_sentence(models, s, config)?,
            })
        })
        .collect()
}

pub fn threshold_corpus(scores: &[SentencePredictions], threshold: f64) -> Vec<SentencePredictions> {
    scores
        .iter()
        .map(|s| SentencePredictions {
            sentence_id: s.sentence_id,
            predictions: apply_threshold(&s.predictions, threshold),
        })
        .collect()
}

pub fn predict_corpus(
    models: &TrainedModels,
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<Vec<SentencePredictions>, EncodeError> {
    let scores = score_corpus(models, dataset, config)?;
    Ok(threshold_corpus(&scores, config.stage2.entityness_threshold))
}

/// Typed spans per sentence, aligned with `dataset`; sentences absent from
/// `predictions` get none.
pub fn spans_by_sentence(predictions: &[SentencePredictions], dataset: &Dataset) -> Vec<Vec<Span>> {
    let by_id: BTreeMap<usize, &SentencePredictions> =
        predictions.iter().map(|p| (p.sentence_id, p)).collect();
    dataset
        .sentences()
        .iter()
        .map(|s| {
            by_id
                .get(&s.id())
                .map(|p| p.predictions.iter().map(Prediction::span).collect())
                .unwrap_or_default()
        })
        .collect()
}
