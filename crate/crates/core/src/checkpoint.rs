//! Single-file JSON checkpoint holding both stages, the vocabulary, the type
//! inventory and the hash of the configuration that produced it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::encoder::{EncodeError, EncoderKind, Vocabulary};
use crate::nn::ParamSnapshot;
use crate::pipeline::{build_stage1, build_stage2, EncoderSource, TrainedModels, TrainingReport};
use crate::region_proposal::Stage1Model;
use crate::stage2::Stage2Model;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("checkpoint was trained with configuration {found}, current configuration hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint has no {0} parameters")]
    MissingStage(&'static str),
    #[error("{0}")]
    Restore(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    /// Absent for the external encoder.
    pub vocabulary: Option<Vocabulary>,
    pub types: Vec<String>,
    pub stage1: Option<Vec<ParamSnapshot>>,
    pub stage2: Option<Vec<ParamSnapshot>>,
    #[serde(default)]
    pub report: Option<TrainingReport>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, source: &EncoderSource, types: &[String]) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config.model_hash(),
            vocabulary: match source {
                EncoderSource::Toy(v) => Some(v.clone()),
                EncoderSource::External(_) => None,
            },
            types: types.to_vec(),
            stage1: None,
            stage2: None,
            report: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serialises");
        fs::write(path, text).map_err(io)
    }

    /// Reads a checkpoint and refuses it unless it was written under `config`.
    pub fn load(path: &Path, config: &RunConfig) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format {
                path: path.display().to_string(),
                message: format!("unsupported format version {}", ckpt.format_version),
            });
        }
        let expected = config.model_hash();
        if ckpt.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch {
                expected,
                found: ckpt.config_hash,
            });
        }
        Ok(ckpt)
    }

    pub fn source(&self, config: &RunConfig) -> Result<EncoderSource, CheckpointError> {
        match config.encoder.kind {
            EncoderKind::Toy => self
                .vocabulary
                .clone()
                .map(EncoderSource::Toy)
                .ok_or_else(|| CheckpointError::Restore("checkpoint has no vocabulary".into())),
            EncoderKind::External => Ok(EncoderSource::external(&config.encoder)?),
        }
    }

    pub fn restore_stage1(&self, config: &RunConfig, source: &EncoderSource) -> Result<Stage1Model, CheckpointError> {
        let snapshot = self.stage1.as_ref().ok_or(CheckpointError::MissingStage("stage-one"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
        let mut model = build_stage1(&config.pipeline(), source, &mut rng);
        model.params.load_snapshot(snapshot).map_err(CheckpointError::Restore)?;
        Ok(model)
    }

    pub fn restore(&self, config: &RunConfig) -> Result<TrainedModels, CheckpointError> {
        let source = self.source(config)?;
        let stage1 = self.restore_stage1(config, &source)?;
        let snapshot = self.stage2.as_ref().ok_or(CheckpointError::MissingStage("stage-two"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
        let mut stage2: Stage2Model = build_stage2(&config.pipeline(), &source, &self.types, &stage1, &mut rng);
        stage2.params.load_snapshot(snapshot).map_err(CheckpointError::Restore)?;
        Ok(TrainedModels { stage1, stage2 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic, WHITESPACE};
    use crate::pipeline::{predict_corpus, train_end_to_end};

    fn config() -> RunConfig {
        RunConfig::from_toml_str(
            "seed = 2\nshare_encoder = true\n[encoder]\nhidden_dim = 8\nlayers = 1\n[stage1]\nepochs = 1\n\
             [stage2]\nn_heads = 2\nhead_dim = 2\nfeat_dim = 4\nepochs_nested = 1\n",
            &[],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_reproduces_predictions() {
        let cfg = config();
        let d = synthetic::generate(5, 1, &WHITESPACE);
        let (models, report) = train_end_to_end(&d, &cfg.pipeline(), cfg.seed()).unwrap();
        let source = EncoderSource::Toy(Vocabulary::from_dataset(&d));
        let mut ckpt = Checkpoint::new(&cfg, &source, d.type_inventory());
        ckpt.stage1 = Some(models.stage1.params.to_snapshot());
        ckpt.stage2 = Some(models.stage2.params.to_snapshot());
        ckpt.report = Some(report);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();

        let restored = Checkpoint::load(&path, &cfg).unwrap().restore(&cfg).unwrap();
        let mut p = cfg.pipeline();
        p.stage2.entityness_threshold = 0.0;
        assert_eq!(
            predict_corpus(&models, &d, &p).unwrap(),
            predict_corpus(&restored, &d, &p).unwrap()
        );

        let other = RunConfig::from_toml_str(&cfg.flat(), &["stage2.alpha=0.9".into()]).unwrap();
        assert!(matches!(Checkpoint::load(&path, &other), Err(CheckpointError::ConfigMismatch { .. })));
    }
}
