//! CoNLL-2003 style column files: token first, NER tag last, blank lines between
//! sentences, `-DOCSTART-` lines ignored.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{keep_length, CorpusError, Dataset, LoadOptions, Sentence, Span};

/// How `I-` tags that do not continue an entity are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagScheme {
    /// IOB1 reading: such an `I-X` opens a new entity. Valid IOB2 decodes identically.
    #[default]
    Auto,
    /// Such an `I-X` is an error.
    Iob2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    if tag == "O" {
        return Some(Tag::Outside);
    }
    let (prefix, label) = tag.split_once('-')?;
    if label.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Tag::Begin(label)),
        "I" => Some(Tag::Inside(label)),
        _ => None,
    }
}

/// Decodes one sentence of IOB tags into typed spans. On failure returns the index of
/// the offending tag and a message.
pub fn decode_iob(tags: &[&str], scheme: TagScheme) -> Result<Vec<Span>, (usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, raw) in tags.iter().enumerate() {
        let tag = parse_tag(raw).ok_or_else(|| (i, format!("malformed tag {raw:?}")))?;
        match tag {
            Tag::Outside => {
                if let Some((s, l)) = open.take() {
                    spans.push(Span::typed(s, i, l));
                }
            }
            Tag::Begin(label) => {
                if let Some((s, l)) = open.take() {
                    spans.push(Span::typed(s, i, l));
                }
                open = Some((i, label));
            }
            Tag::Inside(label) => match open {
                Some((_, l)) if l == label => {}
                _ => {
                    if scheme == TagScheme::Iob2 {
                        return Err((i, format!("{raw} does not continue a {label} entity")));
                    }
                    if let Some((s, l)) = open.take() {
                        spans.push(Span::typed(s, i, l));
                    }
                    open = Some((i, label));
                }
            },
        }
    }
    if let Some((s, l)) = open {
        spans.push(Span::typed(s, tags.len(), l));
    }
    Ok(spans)
}

/// IOB2 tags for a flat span set. Overlapping spans are rejected.
pub fn encode_iob2(n_words: usize, spans: &[Span]) -> Result<Vec<String>, CorpusError> {
    let mut tags = vec!["O".to_string(); n_words];
    let mut taken = vec![false; n_words];
    for s in spans {
        if !s.is_valid_for(n_words) {
            return Err(CorpusError::SpanOutOfRange {
                start: s.start,
                end: s.end,
                n_words,
            });
        }
        let label = s.label.as_deref().unwrap_or("ENT");
        for i in s.start..s.end {
            if taken[i] {
                return Err(CorpusError::NotFlat);
            }
            taken[i] = true;
            tags[i] = if i == s.start {
                format!("B-{label}")
            } else {
                format!("I-{label}")
            };
        }
    }
    Ok(tags)
}

pub fn load_conll(path: &Path, options: &LoadOptions<'_>) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_conll(&text, options)
}

pub fn parse_conll(text: &str, options: &LoadOptions<'_>) -> Result<Dataset, CorpusError> {
    let mut sentences = Vec::new();
    // (1-based line number, token, tag)
    let mut pending: Vec<(usize, String, String)> = Vec::new();

    let mut flush = |pending: &mut Vec<(usize, String, String)>| -> Result<(), CorpusError> {
        if pending.is_empty() {
            return Ok(());
        }
        let tags: Vec<&str> = pending.iter().map(|(_, _, t)| t.as_str()).collect();
        let gold = decode_iob(&tags, options.scheme).map_err(|(i, message)| CorpusError::Parse {
            line: pending[i].0,
            message,
        })?;
        let words = pending.iter().map(|(_, w, _)| w.clone()).collect();
        let sentence = Sentence::new(sentences.len(), words, gold, options.tokenizer)?;
        if keep_length(&sentence, options) {
            sentences.push(sentence);
        }
        pending.clear();
        Ok(())
    };

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut pending)?;
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            flush(&mut pending)?;
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(CorpusError::Parse {
                line: line_no,
                message: format!("expected token and tag columns, got {trimmed:?}"),
            });
        }
        pending.push((line_no, cols[0].to_string(), cols[cols.len() - 1].to_string()));
    }
    flush(&mut pending)?;
    Ok(Dataset::new(sentences))
}

/// Writes a flat dataset as 4-column CoNLL with IOB2 tags. POS and chunk columns are
/// written as `_`.
pub fn write_conll(dataset: &Dataset, out: &mut impl Write) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: "<conll output>".into(),
        source,
    };
    for (i, s) in dataset.sentences().iter().enumerate() {
        if i > 0 {
            writeln!(out).map_err(io)?;
        }
        let tags = encode_iob2(s.len(), s.gold())?;
        for (w, t) in s.words().iter().zip(tags) {
            writeln!(out, "{w} _ _ {t}").map_err(io)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WHITESPACE;
    use proptest::prelude::*;

    fn typed(spans: &[(usize, usize, &str)]) -> Vec<Span> {
        spans.iter().map(|&(s, e, l)| Span::typed(s, e, l)).collect()
    }

    #[test]
    fn decodes_conll_sentence() {
        let text = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\nGerman JJ B-NP B-MISC\ncall NN I-NP O\n\n";
        let d = parse_conll(text, &LoadOptions::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.sentences()[0].gold(), typed(&[(0, 1, "ORG"), (2, 3, "MISC")]));
        assert_eq!(d.type_inventory(), ["MISC", "ORG"]);
    }

    #[test]
    fn all_outside_sentence_has_no_gold() {
        let d = parse_conll("a x y O\nb x y O\n", &LoadOptions::default()).unwrap();
        assert!(d.sentences()[0].gold().is_empty());
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_conll("", &LoadOptions::default()).unwrap().is_empty());
        assert!(parse_conll("\n\n-DOCSTART- O\n\n", &LoadOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn strict_iob2_reports_line_number() {
        let text = "a x y O\nb x y O\n\nc x y O\nd x y I-PER\n";
        let opts = LoadOptions {
            scheme: TagScheme::Iob2,
            ..LoadOptions::default()
        };
        match parse_conll(text, &opts) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        // IOB1 reading accepts it
        let d = parse_conll(text, &LoadOptions::default()).unwrap();
        assert_eq!(d.sentences()[1].gold(), typed(&[(1, 2, "PER")]));
    }

    #[test]
    fn malformed_tag_is_error() {
        assert!(matches!(
            parse_conll("a x y Q-PER\n", &LoadOptions::default()),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn iob1_adjacent_entities_split_on_begin() {
        let spans = decode_iob(&["I-PER", "I-PER", "B-PER", "I-LOC"], TagScheme::Auto).unwrap();
        assert_eq!(spans, typed(&[(0, 2, "PER"), (2, 3, "PER"), (3, 4, "LOC")]));
    }

    /// Independent run finder: a span is a maximal run starting at a `B-X` or at an
    /// `I-X` whose predecessor is not `B-X`/`I-X`, extended over following `I-X`.
    fn brute_force_runs(tags: &[&str]) -> Vec<Span> {
        let label = |t: &str| t.get(2..).map(str::to_string);
        let mut out = Vec::new();
        for s in 0..tags.len() {
            if tags[s] == "O" {
                continue;
            }
            let l = label(tags[s]).unwrap();
            let starts_here = tags[s].starts_with("B-")
                || s == 0
                || tags[s - 1] == "O"
                || label(tags[s - 1]).as_deref() != Some(l.as_str());
            if !starts_here {
                continue;
            }
            let mut e = s + 1;
            while e < tags.len() && tags[e] == format!("I-{l}") {
                e += 1;
            }
            out.push(Span::typed(s, e, l));
        }
        out
    }

    #[test]
    fn decoder_matches_brute_force_on_all_short_sequences() {
        let alphabet = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"];
        assert_eq!(
            decode_iob(&["B-PER", "I-PER", "I-PER"], TagScheme::Auto).unwrap(),
            typed(&[(0, 3, "PER")])
        );
        let mut checked = 0;
        for len in 1..=4u32 {
            for code in 0..alphabet.len().pow(len) {
                let mut c = code;
                let tags: Vec<&str> = (0..len)
                    .map(|_| {
                        let t = alphabet[c % alphabet.len()];
                        c /= alphabet.len();
                        t
                    })
                    .collect();
                assert_eq!(
                    decode_iob(&tags, TagScheme::Auto).unwrap(),
                    brute_force_runs(&tags),
                    "{tags:?}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 5 + 25 + 125 + 625);
    }

    fn flat_spans(n: usize) -> impl Strategy<Value = (usize, Vec<Span>)> {
        proptest::collection::vec((1usize..4, 0usize..3, 0usize..3), 0..6).prop_map(move |parts| {
            let labels = ["PER", "LOC", "ORG"];
            let mut spans = Vec::new();
            let mut cursor = 0;
            for (len, gap, l) in parts {
                let start = cursor + gap;
                let end = start + len;
                if end > n {
                    break;
                }
                spans.push(Span::typed(start, end, labels[l]));
                cursor = end;
            }
            (n, spans)
        })
    }

    proptest! {
        #[test]
        fn iob2_round_trip((n, spans) in (1usize..16).prop_flat_map(flat_spans)) {
            let words: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let s = Sentence::new(0, words, spans.clone(), &WHITESPACE).unwrap();
            let mut buf = Vec::new();
            write_conll(&Dataset::new(vec![s]), &mut buf).unwrap();
            let opts = LoadOptions { scheme: TagScheme::Iob2, ..LoadOptions::default() };
            let back = parse_conll(std::str::from_utf8(&buf).unwrap(), &opts).unwrap();
            let mut expected = spans;
            expected.sort();
            prop_assert_eq!(back.sentences()[0].gold(), expected.as_slice());
        }
    }

    #[test]
    fn nested_spans_cannot_be_encoded() {
        assert!(matches!(
            encode_iob2(3, &typed(&[(0, 3, "A"), (1, 2, "B")])),
            Err(CorpusError::NotFlat)
        ));
    }
}
