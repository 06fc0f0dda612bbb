//! Few-shot prompt rendering for the vanilla and "guided by bad questions"
//! (GBQ) prompt styles.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Number of exemplars used by default.
pub const DEFAULT_NUM_EXAMPLES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("malformed example record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("missing field {name:?} at line {line}")]
    MissingField { name: &'static str, line: usize },
    #[error("a prompt template needs at least one example")]
    NoExamples,
    #[error("example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("target document text is empty")]
    EmptyDocument,
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Vanilla,
    Gbq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub document_text: String,
    pub good_question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bad_question: Option<String>,
}

/// Line labels used when rendering. The defaults produce:
///
/// ```text
/// Example 1:
/// Document: ...
/// Relevant Query: ...
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptCues {
    pub example: String,
    pub document: String,
    pub relevant_query: String,
    pub bad_question: String,
    pub good_question: String,
}

impl Default for PromptCues {
    fn default() -> Self {
        Self {
            example: "Example".into(),
            document: "Document:".into(),
            relevant_query: "Relevant Query:".into(),
            bad_question: "Bad Question:".into(),
            good_question: "Good Question:".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    mode: PromptMode,
    examples: Vec<FewShotExample>,
    header: Option<String>,
    cues: PromptCues,
}

impl PromptTemplate {
    pub fn new(mode: PromptMode, examples: Vec<FewShotExample>) -> Result<Self, PromptError> {
        if examples.is_empty() {
            return Err(PromptError::NoExamples);
        }
        for (i, ex) in examples.iter().enumerate() {
            let index = i + 1;
            let invalid = |reason: &str| PromptError::InvalidExample {
                index,
                reason: reason.into(),
            };
            if ex.document_text.is_empty() {
                return Err(invalid("empty document_text"));
            }
            if ex.good_question.is_empty() {
                return Err(invalid("empty good_question"));
            }
            if mode == PromptMode::Gbq && ex.bad_question.as_deref().unwrap_or("").is_empty() {
                return Err(invalid("gbq prompts need a bad_question"));
            }
        }
        Ok(Self {
            mode,
            examples,
            header: None,
            cues: PromptCues::default(),
        })
    }

    /// Text placed before the first example, separated by a blank line.
    pub fn with_header(mut self, header: impl Into<String>) -> Self {
        self.header = Some(header.into());
        self
    }

    pub fn with_cues(mut self, cues: PromptCues) -> Self {
        self.cues = cues;
        self
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn examples(&self) -> &[FewShotExample] {
        &self.examples
    }

    pub fn cues(&self) -> &PromptCues {
        &self.cues
    }

    /// The label the model is asked to continue.
    pub fn generation_cue(&self) -> &str {
        match self.mode {
            PromptMode::Vanilla => &self.cues.relevant_query,
            PromptMode::Gbq => &self.cues.bad_question,
        }
    }

    /// Renders the exemplars followed by the target document, ending at the
    /// generation cue.
    ///
    /// ```
    /// use inpars::promptkit::{FewShotExample, PromptMode, PromptTemplate};
    /// let ex = FewShotExample {
    ///     document_text: "D1".into(),
    ///     good_question: "Q1".into(),
    ///     bad_question: None,
    /// };
    /// let t = PromptTemplate::new(PromptMode::Vanilla, vec![ex]).unwrap();
    /// assert_eq!(
    ///     t.render("T").unwrap(),
    ///     "Example 1:\nDocument: D1\nRelevant Query: Q1\n\nExample 2:\nDocument: T\nRelevant Query:"
    /// );
    /// ```
    pub fn render(&self, doc_text: &str) -> Result<String, PromptError> {
        if doc_text.is_empty() {
            return Err(PromptError::EmptyDocument);
        }
        let c = &self.cues;
        let mut out = String::new();
        if let Some(header) = &self.header {
            out.push_str(header);
            out.push_str("\n\n");
        }
        for (i, ex) in self.examples.iter().enumerate() {
            let _ = writeln!(out, "{} {}:", c.example, i + 1);
            let _ = writeln!(out, "{} {}", c.document, ex.document_text);
            match self.mode {
                PromptMode::Vanilla => {
                    let _ = writeln!(out, "{} {}", c.relevant_query, ex.good_question);
                }
                PromptMode::Gbq => {
                    let bad = ex.bad_question.as_deref().unwrap_or_default();
                    let _ = writeln!(out, "{} {}", c.bad_question, bad);
                    let _ = writeln!(out, "{} {}", c.good_question, ex.good_question);
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{} {}:", c.example, self.examples.len() + 1);
        let _ = writeln!(out, "{} {}", c.document, doc_text);
        out.push_str(self.generation_cue());
        Ok(out)
    }
}

pub fn render_prompt(template: &PromptTemplate, doc_text: &str) -> Result<String, PromptError> {
    template.render(doc_text)
}

/// Reads exemplars from JSONL (`document_text`, `good_question`, optional
/// `bad_question`), keeping file order. Blank lines are skipped.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<FewShotExample>, PromptError> {
    load_examples_from(BufReader::new(File::open(path)?))
}

pub fn load_examples_from<R: BufRead>(reader: R) -> Result<Vec<FewShotExample>, PromptError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| PromptError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        let obj = value
            .as_object()
            .ok_or_else(|| PromptError::MalformedRecord {
                line: line_no,
                reason: "expected a JSON object".into(),
            })?;
        let field = |name: &'static str| -> Result<Option<String>, PromptError> {
            match obj.get(name) {
                None | Some(serde_json::Value::Null) => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
                Some(_) => Err(PromptError::MalformedRecord {
                    line: line_no,
                    reason: format!("{name} must be a string"),
                }),
            }
        };
        let required = |name: &'static str| {
            field(name)?.ok_or(PromptError::MissingField {
                name,
                line: line_no,
            })
        };
        out.push(FewShotExample {
            document_text: required("document_text")?,
            good_question: required("good_question")?,
            bad_question: field("bad_question")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ex(doc: &str, good: &str, bad: Option<&str>) -> FewShotExample {
        FewShotExample {
            document_text: doc.into(),
            good_question: good.into(),
            bad_question: bad.map(String::from),
        }
    }

    fn fixture(name: &str) -> Vec<FewShotExample> {
        load_examples(format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    #[test]
    fn vanilla_single_example() {
        let t = PromptTemplate::new(PromptMode::Vanilla, vec![ex("D1", "Q1", None)]).unwrap();
        assert_eq!(
            t.render("T").unwrap(),
            "Example 1:\nDocument: D1\nRelevant Query: Q1\n\nExample 2:\nDocument: T\nRelevant Query:"
        );
    }

    #[test]
    fn gbq_single_example() {
        let t = PromptTemplate::new(PromptMode::Gbq, vec![ex("D1", "Q1", Some("B1"))]).unwrap();
        let out = t.render("T").unwrap();
        assert_eq!(
            out,
            "Example 1:\nDocument: D1\nBad Question: B1\nGood Question: Q1\n\nExample 2:\nDocument: T\nBad Question:"
        );
        assert!(out.find("Bad Question: B1").unwrap() < out.find("Good Question: Q1").unwrap());
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = PromptTemplate::new(PromptMode::Gbq, fixture("examples_gbq.jsonl")).unwrap();
        assert_eq!(
            t.render("target").unwrap().as_bytes(),
            t.render("target").unwrap().as_bytes()
        );
    }

    #[test]
    fn shipped_fixtures_render() {
        for (name, mode, cue) in [
            (
                "examples_vanilla.jsonl",
                PromptMode::Vanilla,
                "Relevant Query:",
            ),
            ("examples_gbq.jsonl", PromptMode::Gbq, "Bad Question:"),
        ] {
            let examples = fixture(name);
            assert_eq!(examples.len(), DEFAULT_NUM_EXAMPLES);
            let t = PromptTemplate::new(mode, examples).unwrap();
            let out = t.render("The target document.").unwrap();
            assert!(out.ends_with(cue));
            assert_eq!(out.matches("Document:").count(), 4);
            let last_example = out.rfind("Example 4:").unwrap();
            assert!(out.find("The target document.").unwrap() > last_example);
        }
    }

    #[test]
    fn header_and_cues_are_configurable() {
        let cues = PromptCues {
            relevant_query: "Question:".into(),
            ..PromptCues::default()
        };
        let t = PromptTemplate::new(PromptMode::Vanilla, vec![ex("D", "Q", None)])
            .unwrap()
            .with_header("Write a question.")
            .with_cues(cues);
        let out = t.render("T").unwrap();
        assert!(out.starts_with("Write a question.\n\nExample 1:"));
        assert!(out.ends_with("Question:"));
    }

    #[test]
    fn template_invariants() {
        assert!(matches!(
            PromptTemplate::new(PromptMode::Vanilla, vec![]),
            Err(PromptError::NoExamples)
        ));
        assert!(matches!(
            PromptTemplate::new(PromptMode::Gbq, vec![ex("D", "Q", None)]),
            Err(PromptError::InvalidExample { index: 1, .. })
        ));
        assert!(PromptTemplate::new(PromptMode::Vanilla, vec![ex("", "Q", None)]).is_err());
        let t = PromptTemplate::new(PromptMode::Vanilla, vec![ex("D", "Q", None)]).unwrap();
        assert!(matches!(t.render(""), Err(PromptError::EmptyDocument)));
    }

    #[test]
    fn load_examples_cases() {
        let three = "{\"document_text\":\"a\",\"good_question\":\"1\"}\n\
                     {\"document_text\":\"b\",\"good_question\":\"2\",\"bad_question\":\"x\"}\n\
                     {\"document_text\":\"c\",\"good_question\":\"3\"}\n";
        let got = load_examples_from(Cursor::new(three)).unwrap();
        assert_eq!(
            got.iter()
                .map(|e| e.document_text.as_str())
                .collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(got[1].bad_question.as_deref(), Some("x"));

        let missing = "{\"document_text\":\"a\"}\n";
        assert!(matches!(
            load_examples_from(Cursor::new(missing)),
            Err(PromptError::MissingField {
                name: "good_question",
                line: 1
            })
        ));
        assert!(load_examples_from(Cursor::new("")).unwrap().is_empty());
        assert!(matches!(
            load_examples_from(Cursor::new("not json")),
            Err(PromptError::MalformedRecord { line: 1, .. })
        ));
    }
}
