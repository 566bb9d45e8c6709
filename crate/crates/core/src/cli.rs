//! Command-line interface. Exit codes: 0 success, 1 invalid input or configuration,
//! 2 failure while running.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{length_coverage, load_dataset, synthetic, write_json_spans, Dataset, Span};
use crate::metrics::{classify_errors, error_pie_svg, errors_csv, evaluate, metrics_csv};
use crate::pipeline::{
    propose_all, score_corpus, spans_by_sentence, threshold_corpus, train_stage1, train_stage2, EncoderSource,
    PipelineError, SentencePredictions, TrainedModels,
};
use crate::region_proposal::CandidateRecord;
use crate::stage2::build_examples;

#[derive(Debug, Parser)]
#[command(name = "proposal-ner", version, about = "Two-stage span-based named entity recognition")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set stage2.alpha=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Args)]
pub struct SplitArg {
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PredictionSource {
    #[command(flatten)]
    pub split: SplitArg,
    /// Score an existing prediction file instead of running the checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the boundary model and dump its training-set candidates.
    TrainStage1,
    /// Train the span model on candidates from the stage-one checkpoint.
    TrainStage2,
    /// Train both stages.
    Train,
    /// Write thresholded predictions and the unthresholded score cache.
    Predict(SplitArg),
    /// Write exact-match precision/recall/F1 to metrics.csv.
    Evaluate(PredictionSource),
    /// Write the error composition to errors.csv and errors.svg.
    ProfileErrors(PredictionSource),
    /// Print the fraction of gold spans no longer than each limit.
    Coverage {
        #[command(flatten)]
        split: SplitArg,
        #[arg(long, value_delimiter = ',', default_value = "6,8,12")]
        limits: Vec<usize>,
    },
    /// Re-threshold cached scores and evaluate each threshold.
    SweepThreshold {
        #[command(flatten)]
        split: SplitArg,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5,0.6,0.7")]
        thresholds: Vec<f64>,
        /// Score cache written by `predict`; defaults to the output directory's.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus with nested entities.
    Synth {
        #[arg(long, default_value_t = 50)]
        sentences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::NoEntities | PipelineError::EmptyDataset => {
                CliError::Validation(e.to_string())
            }
            PipelineError::Encode(_) => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    config: RunConfig,
    out: PathBuf,
}

impl Context {
    fn new(cli: &Cli, required: &[&str]) -> Result<Self, CliError> {
        let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
        config.validate(required)?;
        let out = config.data.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
        write_file(&out.join("config.toml"), &config.flat())?;
        Ok(Self { config, out })
    }

    fn dataset(&self, split: Split) -> Result<Dataset, CliError> {
        let path = match split {
            Split::Train => &self.config.data.train,
            Split::Dev => &self.config.data.dev,
            Split::Test => &self.config.data.test,
        }
        .as_ref()
        .expect("validated path");
        let tokenizer = self.config.tokenizer();
        load_dataset(path, &self.config.load_options(tokenizer.as_ref()))
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.out.join(CHECKPOINT_FILE)
    }

    fn models(&self) -> Result<TrainedModels, CliError> {
        let ckpt = Checkpoint::load(&self.checkpoint_path(), &self.config)?;
        Ok(ckpt.restore(&self.config)?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(&row).map_err(runtime)?);
        text.push('\n');
    }
    write_file(path, &text)
}

fn read_predictions(path: &Path) -> Result<Vec<SentencePredictions>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::TrainStage1 => {
            let ctx = Context::new(cli, &["train"])?;
            let data = ctx.dataset(Split::Train)?;
            stage1(&ctx, &data)?;
            Ok(())
        }
        Command::TrainStage2 => {
            let ctx = Context::new(cli, &["train"])?;
            let data = ctx.dataset(Split::Train)?;
            let ckpt = Checkpoint::load(&ctx.checkpoint_path(), &ctx.config)?;
            stage2(&ctx, &data, ckpt)
        }
        Command::Train => {
            let ctx = Context::new(cli, &["train"])?;
            let data = ctx.dataset(Split::Train)?;
            let ckpt = stage1(&ctx, &data)?;
            stage2(&ctx, &data, ckpt)
        }
        Command::Predict(split) => {
            let ctx = Context::new(cli, &[split.split.key()])?;
            let data = ctx.dataset(split.split)?;
            let models = ctx.models()?;
            let pipeline = ctx.config.pipeline();
            let scores = score_corpus(&models, &data, &pipeline).map_err(runtime)?;
            write_jsonl(&ctx.out.join(SCORES_FILE), &scores)?;
            let preds = threshold_corpus(&scores, pipeline.stage2.entityness_threshold);
            write_jsonl(&ctx.out.join(PREDICTIONS_FILE), &preds)?;
            let n: usize = preds.iter().map(|p| p.predictions.len()).sum();
            println!("{n} predictions over {} sentences", preds.len());
            Ok(())
        }
        Command::Evaluate(src) => {
            let (ctx, data, spans) = prediction_spans(cli, src)?;
            let eval = evaluate(&spans, &data);
            write_file(&ctx.out.join("metrics.csv"), &metrics_csv(&eval))?;
            println!(
                "precision {:.4} recall {:.4} f1 {:.4}",
                eval.overall.precision, eval.overall.recall, eval.overall.f1
            );
            Ok(())
        }
        Command::ProfileErrors(src) => {
            let (ctx, data, spans) = prediction_spans(cli, src)?;
            let report = classify_errors(&spans, &data);
            write_file(&ctx.out.join("errors.csv"), &errors_csv(&report))?;
            write_file(&ctx.out.join("errors.svg"), &error_pie_svg(&report))?;
            print!("{}", errors_csv(&report));
            Ok(())
        }
        Command::Coverage { split, limits } => {
            let ctx = Context::new(cli, &[split.split.key()])?;
            let data = ctx.dataset(split.split)?;
            if limits.contains(&0) {
                return Err(CliError::Validation("--limits: every limit must be at least 1".into()));
            }
            let mut text = String::from("limit,coverage\n");
            for &l in limits {
                text.push_str(&format!("{l},{}\n", length_coverage(&data, l)));
            }
            write_file(&ctx.out.join("coverage.csv"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::SweepThreshold {
            split,
            thresholds,
            scores,
        } => {
            let ctx = Context::new(cli, &[split.split.key()])?;
            if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(CliError::Validation("--thresholds: values must lie in [0, 1]".into()));
            }
            let data = ctx.dataset(split.split)?;
            let path = scores.clone().unwrap_or_else(|| ctx.out.join(SCORES_FILE));
            let cached = read_predictions(&path)?;
            let mut text = String::from("threshold,predictions,precision,recall,f1\n");
            for &t in thresholds {
                let preds = threshold_corpus(&cached, t);
                let n: usize = preds.iter().map(|p| p.predictions.len()).sum();
                let eval = evaluate(&spans_by_sentence(&preds, &data), &data);
                text.push_str(&format!(
                    "{t},{n},{},{},{}\n",
                    eval.overall.precision, eval.overall.recall, eval.overall.f1
                ));
            }
            write_file(&ctx.out.join("sweep.csv"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Synth { sentences, seed, out } => {
            let data = synthetic::generate(*sentences, *seed, &crate::corpus::WHITESPACE);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(runtime)?;
            }
            let mut file = fs::File::create(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
            write_json_spans(&data, &mut file).map_err(runtime)?;
            file.flush().map_err(runtime)?;
            Ok(())
        }
    }
}

fn prediction_spans(cli: &Cli, src: &PredictionSource) -> Result<(Context, Dataset, Vec<Vec<Span>>), CliError> {
    let ctx = Context::new(cli, &[src.split.split.key()])?;
    let data = ctx.dataset(src.split.split)?;
    let preds = match &src.predictions {
        Some(p) => read_predictions(p)?,
        None => {
            let pipeline = ctx.config.pipeline();
            let scores = score_corpus(&ctx.models()?, &data, &pipeline).map_err(runtime)?;
            threshold_corpus(&scores, pipeline.stage2.entityness_threshold)
        }
    };
    let spans = spans_by_sentence(&preds, &data);
    Ok((ctx, data, spans))
}

fn stage1(ctx: &Context, data: &Dataset) -> Result<Checkpoint, CliError> {
    let pipeline = ctx.config.pipeline();
    let source = EncoderSource::for_training(&pipeline.encoder, data).map_err(runtime)?;
    let (model, losses) = train_stage1(data, &pipeline, &source, ctx.config.seed())?;
    let candidates = propose_all(&model, data, &pipeline.stage1).map_err(runtime)?;
    write_jsonl(
        &ctx.out.join("stage1_candidates.jsonl"),
        data.sentences()
            .iter()
            .zip(&candidates)
            .map(|(s, c)| CandidateRecord::new(s.id(), c)),
    )?;
    write_file(
        &ctx.out.join("stage1_losses.json"),
        &serde_json::to_string_pretty(&losses).map_err(runtime)?,
    )?;
    let mut ckpt = Checkpoint::new(&ctx.config, &source, data.type_inventory());
    ckpt.stage1 = Some(model.params.to_snapshot());
    ckpt.save(&ctx.checkpoint_path())?;
    Ok(ckpt)
}

fn stage2(ctx: &Context, data: &Dataset, mut ckpt: Checkpoint) -> Result<(), CliError> {
    let pipeline = ctx.config.pipeline();
    let source = ckpt.source(&ctx.config)?;
    let stage1 = ckpt.restore_stage1(&ctx.config, &source)?;
    let candidates: Vec<Vec<Span>> = propose_all(&stage1, data, &pipeline.stage1)
        .map_err(runtime)?
        .into_iter()
        .map(|c| c.into_iter().map(|c| c.span).collect())
        .collect();
    let examples = build_examples(data, &candidates, &pipeline.stage2, pipeline.stage1.length_limit, ctx.config.seed());
    write_jsonl(&ctx.out.join("stage2_examples.jsonl"), &examples)?;
    let (model, mut report) = train_stage2(data, &pipeline, &source, &stage1, ctx.config.seed())?;
    if let Ok(text) = fs::read_to_string(ctx.out.join("stage1_losses.json")) {
        report.stage1_losses = serde_json::from_str(&text).unwrap_or_default();
    }
    write_file(
        &ctx.out.join("training_report.json"),
        &serde_json::to_string_pretty(&report).map_err(runtime)?,
    )?;
    ckpt.types = data.type_inventory().to_vec();
    ckpt.stage2 = Some(model.params.to_snapshot());
    ckpt.report = Some(report);
    ckpt.save(&ctx.checkpoint_path())?;
    Ok(())
}
