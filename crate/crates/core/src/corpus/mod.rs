//! Dataset records, the JSON Lines file format, vocabulary and the
//! synthetic planted-evidence generator.

mod docs;
mod synth;
mod vocab;

pub use docs::{Document, DocumentCollection};
pub use synth::{generate_synthetic, DistractorPolicy, SynthConfig, SynthOutput};
pub use vocab::{build_vocabulary, Vocabulary, BOS, EOS, PAD, UNK};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased whitespace tokenization shared by the dataset and the model.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// One (question, answer, evidence, explanation) record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaeInstance {
    pub id: String,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub evidence: Vec<Vec<String>>,
    /// Empty at pure inference.
    pub explanation: Vec<String>,
    /// Synthetic ground truth; never shown to the model.
    pub planted_index: Option<usize>,
}

impl QaeInstance {
    /// Question followed by answer: the input of the question-answer encoder.
    pub fn qa_tokens(&self) -> Vec<String> {
        self.question.iter().chain(&self.answer).cloned().collect()
    }

    pub fn validate(&self, limits: &Limits) -> Result<()> {
        let invalid = |message: String| Error::InvalidInstance {
            id: self.id.clone(),
            message,
        };
        if self.question.is_empty() {
            return Err(invalid("question is empty".into()));
        }
        let qa = self.question.len() + self.answer.len();
        if qa > limits.max_input {
            return Err(Error::FieldTooLong {
                field: "question",
                len: qa,
                limit: limits.max_input,
            });
        }
        if let Some(p) = self.evidence.iter().find(|p| p.len() > limits.max_paragraph) {
            return Err(Error::FieldTooLong {
                field: "evidence",
                len: p.len(),
                limit: limits.max_paragraph,
            });
        }
        if self.explanation.len() > limits.max_explanation {
            return Err(Error::FieldTooLong {
                field: "explanation",
                len: self.explanation.len(),
                limit: limits.max_explanation,
            });
        }
        if let Some(idx) = self.planted_index {
            if idx >= self.evidence.len() {
                return Err(invalid(format!(
                    "planted_index {idx} out of range for {} paragraphs",
                    self.evidence.len()
                )));
            }
        }
        Ok(())
    }

    /// Cut over-length fields down to `limits`, returning the names of the
    /// fields that were shortened.
    pub fn truncate_to(&mut self, limits: &Limits) -> Vec<&'static str> {
        let mut cut = Vec::new();
        let qa = self.question.len() + self.answer.len();
        if qa > limits.max_input {
            // the answer is the retrieval query, so the question loses its tail
            let keep = limits.max_input.saturating_sub(self.answer.len()).max(1);
            self.question.truncate(keep);
            self.answer
                .truncate(limits.max_input.saturating_sub(self.question.len()));
            cut.push("question");
        }
        let mut evidence_cut = false;
        for p in &mut self.evidence {
            if p.len() > limits.max_paragraph {
                p.truncate(limits.max_paragraph);
                evidence_cut = true;
            }
        }
        if evidence_cut {
            cut.push("evidence");
        }
        if self.explanation.len() > limits.max_explanation {
            self.explanation.truncate(limits.max_explanation);
            cut.push("explanation");
        }
        cut
    }
}

/// Token-count limits applied when loading data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    /// Question plus answer.
    pub max_input: usize,
    pub max_paragraph: usize,
    pub max_explanation: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_input: 944,
            max_paragraph: 944,
            max_explanation: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverLength {
    #[default]
    Reject,
    /// Drop tail tokens and log a warning.
    Truncate,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evidence: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    planted_index: Option<usize>,
}

impl From<&QaeInstance> for Record {
    fn from(inst: &QaeInstance) -> Self {
        Record {
            id: inst.id.clone(),
            question: inst.question.join(" "),
            answer: inst.answer.join(" "),
            evidence: (!inst.evidence.is_empty())
                .then(|| inst.evidence.iter().map(|p| p.join(" ")).collect()),
            explanation: (!inst.explanation.is_empty()).then(|| inst.explanation.join(" ")),
            planted_index: inst.planted_index,
        }
    }
}

impl From<Record> for QaeInstance {
    fn from(r: Record) -> Self {
        QaeInstance {
            id: r.id,
            question: tokenize(&r.question),
            answer: tokenize(&r.answer),
            evidence: r
                .evidence
                .unwrap_or_default()
                .iter()
                .map(|p| tokenize(p))
                .collect(),
            explanation: r.explanation.as_deref().map(tokenize).unwrap_or_default(),
            planted_index: r.planted_index,
        }
    }
}

/// Parse dataset records from JSON Lines text. Blank lines are skipped but
/// still counted for error line numbers.
pub fn parse_dataset(
    reader: impl BufRead,
    limits: &Limits,
    policy: OverLength,
) -> Result<Vec<QaeInstance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut inst = QaeInstance::from(record);
        if policy == OverLength::Truncate {
            for field in inst.truncate_to(limits) {
                log::warn!("line {line_no}: truncated over-length `{field}` of {}", inst.id);
            }
        }
        inst.validate(limits).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, limits: &Limits, policy: OverLength) -> Result<Vec<QaeInstance>> {
    let file = fs::File::open(path)?;
    parse_dataset(BufReader::new(file), limits, policy)
}

/// Canonical JSON Lines serialization: one record per line, fixed key
/// order, tokens joined by single spaces, optional keys omitted when empty.
pub fn dataset_to_string(instances: &[QaeInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(&Record::from(inst)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, instances: &[QaeInstance]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(dataset_to_string(instances).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<QaeInstance>> {
        parse_dataset(text.as_bytes(), &Limits::default(), OverLength::Reject)
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn missing_question_is_schema_error_at_line_one() {
        let err = parse(r#"{"id":"a","answer":"x"}"#).unwrap_err();
        match err {
            Error::Schema { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("question"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"x\"}\n{not json\n";
        match parse(text).unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn three_lines_round_trip_in_order() {
        let text = concat!(
            r#"{"id":"q1","question":"what is it","answer":"a","evidence":["p one","p two"],"explanation":"because p one","planted_index":0}"#,
            "\n",
            r#"{"id":"q2","question":"why","answer":"b"}"#,
            "\n",
            r#"{"id":"q3","question":"how so","answer":"c d","explanation":"it is"}"#,
            "\n"
        );
        let data = parse(text).unwrap();
        let ids: Vec<_> = data.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
        assert_eq!(data[0].evidence[1], ["p", "two"]);
        assert_eq!(dataset_to_string(&data), text);
    }

    #[test]
    fn over_length_explanation_names_field_and_limit() {
        let limits = Limits {
            max_explanation: 2,
            ..Limits::default()
        };
        let text = r#"{"id":"a","question":"q","answer":"x","explanation":"one two three"}"#;
        let err = parse_dataset(text.as_bytes(), &limits, OverLength::Reject).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("explanation") && msg.contains('2'), "{msg}");

        let data = parse_dataset(text.as_bytes(), &limits, OverLength::Truncate).unwrap();
        assert_eq!(data[0].explanation, ["one", "two"]);
    }

    #[test]
    fn planted_index_must_point_at_a_paragraph() {
        let text = r#"{"id":"a","question":"q","answer":"x","evidence":["p"],"planted_index":1}"#;
        assert!(parse(text).is_err());
    }

    #[test]
    fn qa_truncation_keeps_the_answer() {
        let mut inst = QaeInstance {
            id: "a".into(),
            question: tokenize("a b c d e"),
            answer: tokenize("x y"),
            evidence: vec![],
            explanation: vec![],
            planted_index: None,
        };
        let limits = Limits {
            max_input: 4,
            ..Limits::default()
        };
        assert_eq!(inst.truncate_to(&limits), ["question"]);
        assert_eq!(inst.qa_tokens(), ["a", "b", "x", "y"]);
    }
}
