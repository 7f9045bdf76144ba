//! Passage/question JSONL datasets.
//!
//! One object per line:
//! `{"id": str, "context": [str...], "qas": [{"qid": str, "question": [str...],
//! "answers": [str], "span": [start, end] | null}]}`.
//! Span indices count the `[BOS]` slot, so the first context word is index 1.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokens::{normalize_words, tokenize_words, Span, TokenSequence};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PASSAGE_TOKENS: usize = 456;
pub const DEFAULT_MAX_QUESTION_TOKENS: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaEntry {
    pub qid: String,
    pub question: Vec<String>,
    pub answers: Vec<String>,
    pub span: Option<[usize; 2]>,
}

/// One JSONL line of a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassageRecord {
    pub id: String,
    pub context: Vec<String>,
    pub qas: Vec<QaEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLimits {
    /// Context tokens, excluding `[BOS]`.
    pub max_passage_tokens: usize,
    /// Question tokens, excluding `[BOS]`.
    pub max_question_tokens: usize,
}

impl Default for DatasetLimits {
    fn default() -> Self {
        Self {
            max_passage_tokens: DEFAULT_MAX_PASSAGE_TOKENS,
            max_question_tokens: DEFAULT_MAX_QUESTION_TOKENS,
        }
    }
}

/// A tokenized context passage. `words` keeps the original casing.
#[derive(Clone, Debug, PartialEq)]
pub struct Passage {
    pub id: String,
    pub words: Vec<String>,
    pub tokens: TokenSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QARecord {
    pub qid: String,
    pub passage_id: String,
    pub question: TokenSequence,
    pub answer_span: Option<Span>,
    pub answer_text: String,
    /// Every acceptable answer string, for EM/F1.
    pub answers: Vec<String>,
}

pub type Dataset = Vec<(Passage, Vec<QARecord>)>;

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<PassageRecord>> {
    parse_jsonl(text)
}

pub(crate) fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn check_words(words: &[String], what: &str) -> Result<()> {
    if words.iter().any(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
        return Err(Error::Validation(format!("{what} contains an empty or whitespace token")));
    }
    Ok(())
}

/// Structural validation that does not need a vocabulary.
pub fn validate_dataset(records: &[PassageRecord], limits: &DatasetLimits) -> Result<()> {
    let mut qids = HashSet::new();
    let mut pids = HashSet::new();
    for rec in records {
        if !pids.insert(rec.id.as_str()) {
            return Err(Error::Validation(format!("duplicate passage id {:?}", rec.id)));
        }
        check_words(&rec.context, &format!("passage {:?}", rec.id))?;
        if rec.context.len() > limits.max_passage_tokens {
            return Err(Error::Validation(format!(
                "passage {:?} has {} tokens, limit is {}",
                rec.id,
                rec.context.len(),
                limits.max_passage_tokens
            )));
        }
        let seq_len = rec.context.len() + 1;
        for qa in &rec.qas {
            if !qids.insert(qa.qid.as_str()) {
                return Err(Error::Validation(format!("duplicate qid {:?}", qa.qid)));
            }
            check_words(&qa.question, &format!("question {:?}", qa.qid))?;
            if qa.question.len() > limits.max_question_tokens {
                return Err(Error::Validation(format!(
                    "question {:?} has {} tokens, limit is {}",
                    qa.qid,
                    qa.question.len(),
                    limits.max_question_tokens
                )));
            }
            if let Some([start, end]) = qa.span {
                Span::new(start, end, seq_len)
                    .map_err(|e| Error::Validation(format!("qid {:?}: {e}", qa.qid)))?;
                let span_words: Vec<String> =
                    rec.context[start - 1..end].iter().map(|w| w.to_lowercase()).collect();
                if !qa.answers.iter().any(|a| normalize_words(a) == span_words) {
                    return Err(Error::Validation(format!(
                        "qid {:?}: span [{start}, {end}] does not match any answer",
                        qa.qid
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Converts validated records to tokenized passages and question records.
pub fn tokenize_dataset(records: &[PassageRecord], vocab: &Vocabulary) -> Dataset {
    records
        .iter()
        .map(|rec| {
            let passage = Passage {
                id: rec.id.clone(),
                words: rec.context.clone(),
                tokens: tokenize_words(&rec.context, vocab),
            };
            let qas = rec
                .qas
                .iter()
                .map(|qa| {
                    let span = qa.span.map(|[s, e]| Span { start: s, end: e });
                    let answer_text = match span {
                        Some(sp) => rec.context[sp.start - 1..=sp.end - 1].join(" ").to_lowercase(),
                        None => qa.answers.first().cloned().unwrap_or_default(),
                    };
                    QARecord {
                        qid: qa.qid.clone(),
                        passage_id: rec.id.clone(),
                        question: tokenize_words(&qa.question, vocab),
                        answer_span: span,
                        answer_text,
                        answers: qa.answers.clone(),
                    }
                })
                .collect();
            (passage, qas)
        })
        .collect()
}

pub fn read_dataset_records(path: &Path, limits: &DatasetLimits) -> Result<Vec<PassageRecord>> {
    let text = fs::read_to_string(path)?;
    let records = parse_dataset(&text)?;
    validate_dataset(&records, limits)?;
    Ok(records)
}

/// Reads, validates and tokenizes a dataset file.
pub fn load_dataset(path: &Path, vocab: &Vocabulary, limits: &DatasetLimits) -> Result<Dataset> {
    let records = read_dataset_records(path, limits)?;
    Ok(tokenize_dataset(&records, vocab))
}

pub fn write_dataset(path: &Path, records: &[PassageRecord]) -> Result<()> {
    write_jsonl(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = r#"{"id": "p1", "context": ["Marie", "Curie", "discovered", "radium", "."], "qas": [{"qid": "q1", "question": ["who", "discovered", "radium", "?"], "answers": ["marie curie"], "span": [1, 2]}, {"qid": "q2", "question": ["what", "did", "she", "find", "?"], "answers": ["radium"], "span": [4, 4]}]}
"#;

    fn load_str(text: &str) -> Result<Dataset> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, text).unwrap();
        let vocab = Vocabulary::build(["marie", "curie", "discovered", "radium", "who"]);
        load_dataset(&path, &vocab, &DatasetLimits::default())
    }

    #[test]
    fn empty_file_loads_as_empty() {
        assert!(load_str("").unwrap().is_empty());
    }

    #[test]
    fn fixture_has_one_passage_two_questions() {
        let d = load_str(FIXTURE).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].1.len(), 2);
        assert_eq!(d[0].1[0].answer_span, Some(Span { start: 1, end: 2 }));
        assert_eq!(d[0].1[0].answer_text, "marie curie");
        assert_eq!(d[0].0.tokens.len(), 6);
    }

    #[test]
    fn span_covering_bos_is_rejected_with_qid() {
        let bad = FIXTURE.replace("[1, 2]", "[0, 0]");
        match load_str(&bad) {
            Err(Error::Validation(msg)) => assert!(msg.contains("q1"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn span_past_end_is_rejected() {
        let bad = FIXTURE.replace("[4, 4]", "[4, 6]");
        match load_str(&bad) {
            Err(Error::Validation(msg)) => assert!(msg.contains("q2")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let text = format!("{FIXTURE}{{not json\n");
        assert!(matches!(load_str(&text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn long_question_is_rejected() {
        let q: Vec<String> = (0..51).map(|i| format!("w{i}")).collect();
        let rec = PassageRecord {
            id: "p".into(),
            context: vec!["a".into()],
            qas: vec![QaEntry { qid: "q".into(), question: q, answers: vec![], span: None }],
        };
        assert!(validate_dataset(&[rec], &DatasetLimits::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn arbitrary_text_parses_or_errors(text in "\\PC{0,200}") {
            if let Ok(recs) = parse_dataset(&text) {
                let _ = validate_dataset(&recs, &DatasetLimits::default());
            }
        }

        #[test]
        fn mutated_fixture_parses_or_errors(pos in 0usize..600, byte in any::<u8>()) {
            let mut bytes = FIXTURE.as_bytes().to_vec();
            let p = pos % bytes.len();
            bytes[p] = byte;
            if let Ok(text) = String::from_utf8(bytes) {
                if let Ok(recs) = parse_dataset(&text) {
                    let _ = validate_dataset(&recs, &DatasetLimits::default());
                }
            }
        }
    }
}
