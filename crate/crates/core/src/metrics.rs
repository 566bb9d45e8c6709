//! Exact-match evaluation, per-type breakdowns and the six-class error taxonomy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Span};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub pred_total: usize,
    pub gold_total: usize,
}

impl Scores {
    /// Precision is 0 without predictions, recall is 0 without gold.
    pub fn from_counts(true_pos: usize, pred_total: usize, gold_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_pos, pred_total);
        let recall = ratio(true_pos, gold_total);
        Self {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
            true_pos,
            pred_total,
            gold_total,
        }
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub overall: Scores,
    pub per_type: BTreeMap<String, Scores>,
}

fn typed_key(s: &Span) -> (usize, usize, String) {
    (s.start, s.end, s.label.clone().unwrap_or_default())
}

/// Micro-averaged exact (span, type) match. `predictions[k]` belongs to the `k`-th
/// sentence of `dataset`; repeated predictions count once.
pub fn evaluate(predictions: &[Vec<Span>], dataset: &Dataset) -> EvalResult {
    assert_eq!(predictions.len(), dataset.len(), "one prediction list per sentence");
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for t in dataset.type_inventory() {
        counts.entry(t.clone()).or_default();
    }
    for (preds, sentence) in predictions.iter().zip(dataset.sentences()) {
        let gold: BTreeSet<_> = sentence.gold().iter().map(typed_key).collect();
        let pred: BTreeSet<_> = preds.iter().map(typed_key).collect();
        for p in &pred {
            let c = counts.entry(p.2.clone()).or_default();
            c.1 += 1;
            if gold.contains(p) {
                c.0 += 1;
            }
        }
        for g in &gold {
            counts.entry(g.2.clone()).or_default().2 += 1;
        }
    }
    let per_type: BTreeMap<String, Scores> = counts
        .into_iter()
        .map(|(t, (tp, p, g))| (t, Scores::from_counts(tp, p, g)))
        .collect();
    let (tp, p, g) = per_type.values().fold((0, 0, 0), |a, s| {
        (a.0 + s.true_pos, a.1 + s.pred_total, a.2 + s.gold_total)
    });
    EvalResult {
        overall: Scores::from_counts(tp, p, g),
        per_type,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    TypeError,
    BoundaryTypeCorrect,
    BoundaryTypeWrong,
    OverTrigger,
    UnderTrigger,
    DoubleBoundaryOverlap,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 6] = [
        ErrorClass::TypeError,
        ErrorClass::BoundaryTypeCorrect,
        ErrorClass::BoundaryTypeWrong,
        ErrorClass::OverTrigger,
        ErrorClass::UnderTrigger,
        ErrorClass::DoubleBoundaryOverlap,
    ];

    /// The classes assigned to predictions rather than gold spans.
    pub const PREDICTION_SIDE: [ErrorClass; 5] = [
        ErrorClass::TypeError,
        ErrorClass::BoundaryTypeCorrect,
        ErrorClass::BoundaryTypeWrong,
        ErrorClass::OverTrigger,
        ErrorClass::DoubleBoundaryOverlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::TypeError => "type_error",
            ErrorClass::BoundaryTypeCorrect => "boundary_type_correct",
            ErrorClass::BoundaryTypeWrong => "boundary_type_wrong",
            ErrorClass::OverTrigger => "over_trigger",
            ErrorClass::UnderTrigger => "under_trigger",
            ErrorClass::DoubleBoundaryOverlap => "double_boundary_overlap",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown error class {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub counts: BTreeMap<ErrorClass, usize>,
    pub total_errors: usize,
}

impl Default for ErrorReport {
    fn default() -> Self {
        Self {
            counts: ErrorClass::ALL.into_iter().map(|c| (c, 0)).collect(),
            total_errors: 0,
        }
    }
}

impl ErrorReport {
    pub fn count(&self, class: ErrorClass) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn fraction(&self, class: ErrorClass) -> f64 {
        if self.total_errors == 0 {
            0.0
        } else {
            self.count(class) as f64 / self.total_errors as f64
        }
    }

    pub fn prediction_side_total(&self) -> usize {
        ErrorClass::PREDICTION_SIDE.iter().map(|&c| self.count(c)).sum()
    }

    fn add(&mut self, class: ErrorClass) {
        *self.counts.entry(class).or_default() += 1;
        self.total_errors += 1;
    }

    fn merge(&mut self, other: &ErrorReport) {
        for (&c, &n) in &other.counts {
            *self.counts.entry(c).or_default() += n;
        }
        self.total_errors += other.total_errors;
    }
}

/// Error classes of one sentence's (deduplicated) predictions and unmatched gold.
pub fn classify_sentence(predictions: &[Span], gold: &[Span]) -> ErrorReport {
    let mut report = ErrorReport::default();
    let preds: BTreeSet<_> = predictions.iter().map(typed_key).collect();
    let gold_keys: BTreeSet<_> = gold.iter().map(typed_key).collect();
    let mut consumed = vec![false; gold.len()];
    for (i, g) in gold.iter().enumerate() {
        if preds.contains(&typed_key(g)) {
            consumed[i] = true;
        }
    }
    let mut remaining: Vec<Span> = preds
        .iter()
        .filter(|p| !gold_keys.contains(*p))
        .map(|(s, e, t)| Span::typed(*s, *e, t.clone()))
        .collect();

    remaining.retain(|p| match gold.iter().position(|g| g.same_region(p)) {
        Some(i) => {
            consumed[i] = true;
            report.add(ErrorClass::TypeError);
            false
        }
        None => true,
    });

    remaining.retain(|p| {
        let one_boundary = gold
            .iter()
            .enumerate()
            .filter(|(_, g)| (g.start == p.start) != (g.end == p.end))
            .min_by_key(|(i, g)| (consumed[*i], std::cmp::Reverse(g.intersection(p)), g.start, g.end));
        match one_boundary {
            Some((i, g)) => {
                consumed[i] = true;
                report.add(if g.label == p.label {
                    ErrorClass::BoundaryTypeCorrect
                } else {
                    ErrorClass::BoundaryTypeWrong
                });
                false
            }
            None => true,
        }
    });

    for p in &remaining {
        report.add(if gold.iter().any(|g| g.overlaps(p)) {
            ErrorClass::DoubleBoundaryOverlap
        } else {
            ErrorClass::OverTrigger
        });
    }

    for g in gold {
        if !preds.iter().any(|(s, e, _)| g.overlaps(&Span::new(*s, *e))) {
            report.add(ErrorClass::UnderTrigger);
        }
    }
    report
}

pub fn classify_errors(predictions: &[Vec<Span>], dataset: &Dataset) -> ErrorReport {
    assert_eq!(predictions.len(), dataset.len(), "one prediction list per sentence");
    let mut report = ErrorReport::default();
    for (preds, sentence) in predictions.iter().zip(dataset.sentences()) {
        report.merge(&classify_sentence(preds, sentence.gold()));
    }
    report
}

pub const METRICS_HEADER: &str = "scope,type,precision,recall,f1,tp,pred,gold";
pub const ERRORS_HEADER: &str = "class,count,fraction";

fn scores_row(scope: &str, label: &str, s: &Scores) -> String {
    format!(
        "{scope},{label},{},{},{},{},{},{}\n",
        s.precision, s.recall, s.f1, s.true_pos, s.pred_total, s.gold_total
    )
}

pub fn metrics_csv(eval: &EvalResult) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    out.push_str(&scores_row("overall", "", &eval.overall));
    for (t, s) in &eval.per_type {
        out.push_str(&scores_row("type", t, s));
    }
    out
}

pub fn errors_csv(report: &ErrorReport) -> String {
    let mut out = format!("{ERRORS_HEADER}\n");
    for c in ErrorClass::ALL {
        out.push_str(&format!("{c},{},{}\n", report.count(c), report.fraction(c)));
    }
    out
}

fn data_lines<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => {
            return Err(MetricsError::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("expected header {header:?}"),
            })
        }
    }
    Ok(lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 1, l.split(',').collect()))
        .collect())
}

fn parse_field<T: FromStr>(field: &str, path: &Path, line: usize) -> Result<T, MetricsError>
where
    T::Err: fmt::Display,
{
    field.parse().map_err(|e: T::Err| MetricsError::Parse {
        path: path.display().to_string(),
        line,
        message: format!("{field:?}: {e}"),
    })
}

pub fn read_metrics_csv(path: &Path) -> Result<EvalResult, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut eval = EvalResult::default();
    for (line, f) in data_lines(&text, METRICS_HEADER, path)? {
        if f.len() != 8 {
            return Err(MetricsError::Parse {
                path: path.display().to_string(),
                line,
                message: format!("expected 8 fields, found {}", f.len()),
            });
        }
        let s = Scores {
            precision: parse_field(f[2], path, line)?,
            recall: parse_field(f[3], path, line)?,
            f1: parse_field(f[4], path, line)?,
            true_pos: parse_field(f[5], path, line)?,
            pred_total: parse_field(f[6], path, line)?,
            gold_total: parse_field(f[7], path, line)?,
        };
        match f[0] {
            "overall" => eval.overall = s,
            "type" => {
                eval.per_type.insert(f[1].to_string(), s);
            }
            other => {
                return Err(MetricsError::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("unknown scope {other:?}"),
                })
            }
        }
    }
    Ok(eval)
}

pub fn read_errors_csv(path: &Path) -> Result<ErrorReport, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut report = ErrorReport::default();
    for (line, f) in data_lines(&text, ERRORS_HEADER, path)? {
        if f.len() != 3 {
            return Err(MetricsError::Parse {
                path: path.display().to_string(),
                line,
                message: format!("expected 3 fields, found {}", f.len()),
            });
        }
        let class: ErrorClass = parse_field(f[0], path, line)?;
        let n: usize = parse_field(f[1], path, line)?;
        report.counts.insert(class, n);
        report.total_errors += n;
    }
    Ok(report)
}

const PIE_COLOURS: [&str; 6] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948"];

/// Pie chart of the error composition as a standalone SVG document.
pub fn error_pie_svg(report: &ErrorReport) -> String {
    let (cx, cy, r) = (120.0, 120.0, 100.0);
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"460\" height=\"240\" viewBox=\"0 0 460 240\">\n",
    );
    let mut angle = -std::f64::consts::FRAC_PI_2;
    for (i, c) in ErrorClass::ALL.into_iter().enumerate() {
        let frac = report.fraction(c);
        let colour = PIE_COLOURS[i];
        if frac >= 1.0 {
            svg.push_str(&format!("  <circle cx=\"{cx}\" cy=\"{cy}\" r=\"{r}\" fill=\"{colour}\"/>\n"));
        } else if frac > 0.0 {
            let end = angle + frac * std::f64::consts::TAU;
            let large = if frac > 0.5 { 1 } else { 0 };
            svg.push_str(&format!(
                "  <path d=\"M {cx} {cy} L {:.3} {:.3} A {r} {r} 0 {large} 1 {:.3} {:.3} Z\" fill=\"{colour}\"/>\n",
                cx + r * angle.cos(),
                cy + r * angle.sin(),
                cx + r * end.cos(),
                cy + r * end.sin(),
            ));
            angle = end;
        }
        let y = 30 + 30 * i;
        svg.push_str(&format!(
            "  <rect x=\"250\" y=\"{}\" width=\"14\" height=\"14\" fill=\"{colour}\"/>\n  <text x=\"270\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{c} {} ({:.1}%)</text>\n",
            y - 11,
            y,
            report.count(c),
            100.0 * frac
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub errors: PathBuf,
    pub chart: Option<PathBuf>,
}

/// Writes `metrics.csv`, `errors.csv` and, with `chart`, `errors.svg` into `dir`.
pub fn emit_report(
    eval: &EvalResult,
    errors: &ErrorReport,
    dir: &Path,
    chart: bool,
) -> Result<ReportFiles, MetricsError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, metrics_csv(eval)).map_err(io_err(&metrics))?;
    let errors_path = dir.join("errors.csv");
    fs::write(&errors_path, errors_csv(errors)).map_err(io_err(&errors_path))?;
    let chart = if chart {
        let p = dir.join("errors.svg");
        fs::write(&p, error_pie_svg(errors)).map_err(io_err(&p))?;
        Some(p)
    } else {
        None
    };
    Ok(ReportFiles {
        metrics,
        errors: errors_path,
        chart,
    })
}
