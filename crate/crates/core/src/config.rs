//! Run configuration: TOML files with `key.path = value` overrides, a flat echo of
//! the effective values, and the hash that ties checkpoints to their configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::corpus::{ChunkTokenizer, LoadOptions, SubwordTokenizer, TagScheme, WHITESPACE};
use crate::encoder::EncoderConfig;
use crate::pipeline::PipelineConfig;
use crate::region_proposal::Stage1Config;
use crate::stage2::Stage2Config;

pub const OUTPUT_DIR_ENV: &str = "PROPOSAL_NER_OUTPUT_DIR";

/// Keys that only affect thresholding at inference and so stay out of the hash.
const INFERENCE_ONLY_KEYS: &[&str] = &["stage2.entityness_threshold"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Chunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub tokenizer: TokenizerKind,
    /// Subtoken length for the chunk tokenizer.
    pub chunk: usize,
    pub tag_scheme: TagScheme,
    pub max_subtokens: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            output_dir: PathBuf::from("runs/latest"),
            tokenizer: TokenizerKind::Whitespace,
            chunk: 4,
            tag_scheme: TagScheme::Auto,
            max_subtokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub share_encoder: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(format!("config: {e}")))?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                return Ok(RunConfig {
                    data: DataConfig {
                        output_dir: dir.into(),
                        ..config.data
                    },
                    ..config
                });
            }
        }
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Field-level checks. `required` names the data paths the command reads.
    pub fn validate(&self, required: &[&str]) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.seed.is_none() {
            problems.push("seed: required".to_string());
        }
        for key in required {
            let path = match *key {
                "train" => &self.data.train,
                "dev" => &self.data.dev,
                "test" => &self.data.test,
                other => unreachable!("unknown data key {other}"),
            };
            match path {
                None => problems.push(format!("data.{key}: required by this command")),
                Some(p) if !p.exists() => problems.push(format!("data.{key}: {} does not exist", p.display())),
                Some(_) => {}
            }
        }
        if self.data.tokenizer == TokenizerKind::Chunk && self.data.chunk == 0 {
            problems.push("data.chunk: must be at least 1".into());
        }
        if let Err(e) = self.pipeline().validate() {
            problems.push(e);
        }
        if let Some(p) = &self.encoder.external_path {
            if !Path::new(p).exists() {
                problems.push(format!("encoder.external_path: {p} does not exist"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems.join("\n")))
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            encoder: self.encoder.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            share_encoder: self.share_encoder,
        }
    }

    pub fn tokenizer(&self) -> Box<dyn SubwordTokenizer> {
        match self.data.tokenizer {
            TokenizerKind::Whitespace => Box::new(WHITESPACE),
            TokenizerKind::Chunk => Box::new(ChunkTokenizer { chunk: self.data.chunk }),
        }
    }

    pub fn load_options<'a>(&self, tokenizer: &'a dyn SubwordTokenizer) -> LoadOptions<'a> {
        LoadOptions {
            tokenizer,
            max_subtokens: self.data.max_subtokens,
            scheme: self.data.tag_scheme,
        }
    }

    /// Every effective value as sorted `key.path = value` lines.
    pub fn flat(&self) -> String {
        let value = Value::try_from(self).expect("config serialises");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over the flat form, without data paths and inference-only keys.
    pub fn model_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for line in self.flat().lines() {
            let key = line.split(" = ").next().unwrap_or_default();
            let path_key = matches!(key, "data.train" | "data.dev" | "data.test" | "data.output_dir");
            if path_key || INFERENCE_ONLY_KEYS.contains(&key) {
                continue;
            }
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Applies `key.path=value`. The value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override {assignment:?}: expected key.path=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Invalid(format!("override {assignment:?}: empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut segments: Vec<&str> = key.split('.').collect();
    let last = segments.pop().expect("non-empty key");
    let mut node = table;
    for seg in segments {
        node = match node
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(ConfigError::Invalid(format!("override {assignment:?}: {seg} is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
