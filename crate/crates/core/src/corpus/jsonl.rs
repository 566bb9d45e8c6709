//! JSON-lines span records: `{"tokens": [...], "entities": [{"start", "end", "type"}]}`.
//! Ends are exclusive; entities may overlap.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{keep_length, CorpusError, Dataset, LoadOptions, Sentence, Span};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<Entity>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entity {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    label: String,
}

pub fn load_json_spans(path: &Path, options: &LoadOptions<'_>) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_json_spans(&text, options)
}

pub fn parse_json_spans(text: &str, options: &LoadOptions<'_>) -> Result<Dataset, CorpusError> {
    let mut sentences = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let record: Record = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let gold = record
            .entities
            .into_iter()
            .map(|e| Span::typed(e.start, e.end, e.label))
            .collect();
        let sentence = Sentence::new(sentences.len(), record.tokens, gold, options.tokenizer)
            .map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        if keep_length(&sentence, options) {
            sentences.push(sentence);
        }
    }
    Ok(Dataset::new(sentences))
}

pub fn write_json_spans(dataset: &Dataset, out: &mut impl Write) -> Result<(), CorpusError> {
    for s in dataset.sentences() {
        let record = Record {
            tokens: s.words().to_vec(),
            entities: s
                .gold()
                .iter()
                .map(|g| Entity {
                    start: g.start,
                    end: g.end,
                    label: g.label.clone().unwrap_or_default(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&record).expect("record serialises");
        writeln!(out, "{line}").map_err(|source| CorpusError::Io {
            path: "<jsonl output>".into(),
            source,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_entities_are_kept() {
        let text = r#"{"tokens": ["a","b","c","d","e"], "entities": [{"start":0,"end":3,"type":"ORG"},{"start":1,"end":2,"type":"PER"}]}"#;
        let d = parse_json_spans(text, &LoadOptions::default()).unwrap();
        let gold = d.sentences()[0].gold();
        assert_eq!(gold, [Span::typed(0, 3, "ORG"), Span::typed(1, 2, "PER")]);
        assert!(d.sentences()[0].has_overlapping_gold());
    }

    #[test]
    fn empty_entity_list() {
        let d = parse_json_spans(r#"{"tokens": ["a"], "entities": []}"#, &LoadOptions::default())
            .unwrap();
        assert!(d.sentences()[0].gold().is_empty());
    }

    #[test]
    fn out_of_range_entity_rejects_record() {
        let text = r#"{"tokens": ["a","b","c","d","e"], "entities": [{"start":2,"end":6,"type":"ORG"}]}"#;
        assert!(matches!(
            parse_json_spans(text, &LoadOptions::default()),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_entities_are_collapsed() {
        let text = r#"{"tokens": ["a","b"], "entities": [{"start":0,"end":1,"type":"X"},{"start":0,"end":1,"type":"X"}]}"#;
        let d = parse_json_spans(text, &LoadOptions::default()).unwrap();
        assert_eq!(d.gold_total(), 1);
    }

    #[test]
    fn overlong_sentences_are_dropped() {
        let text = "{\"tokens\": [\"a\",\"b\",\"c\"]}\n{\"tokens\": [\"a\"]}\n";
        let opts = LoadOptions {
            max_subtokens: Some(2),
            ..LoadOptions::default()
        };
        let d = parse_json_spans(text, &opts).unwrap();
        assert_eq!(d.len(), 1);
    }
}
