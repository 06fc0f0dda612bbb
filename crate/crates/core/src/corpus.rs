//! Document collections: ingestion, canonical export and length-filtered sampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum presentation length (in characters) for a document to be used as
/// a generation input.
pub const DEFAULT_MIN_CHARS: usize = 300;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("only {eligible} eligible documents, {requested} requested")]
    InsufficientEligibleDocuments { eligible: usize, requested: usize },
    #[error("unknown corpus format {0:?} (expected jsonl or tsv)")]
    UnknownFormat(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(rename = "text")]
    pub body: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: Option<String>, body: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            title,
            body: body.into(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.doc_id.is_empty() {
            return Err("empty doc_id".into());
        }
        if self.body.is_empty() && self.title.as_deref().unwrap_or("").is_empty() {
            return Err(format!(
                "document {:?} has neither title nor text",
                self.doc_id
            ));
        }
        Ok(())
    }

    /// The text a model or index sees: the title followed by a single space
    /// and the body, or just the body when there is no (non-empty) title.
    ///
    /// ```
    /// use inpars::corpus::Document;
    /// let doc = Document::new("d1", Some("Gold".into()), "Price fell.");
    /// assert_eq!(doc.presentation_text(), "Gold Price fell.");
    /// ```
    pub fn presentation_text(&self) -> String {
        match self.title.as_deref() {
            Some(title) if !title.is_empty() => format!("{title} {}", self.body),
            _ => self.body.clone(),
        }
    }

    /// Length of [`Document::presentation_text`] in Unicode scalar values.
    pub fn presentation_chars(&self) -> usize {
        match self.title.as_deref() {
            Some(title) if !title.is_empty() => {
                title.chars().count() + 1 + self.body.chars().count()
            }
            _ => self.body.chars().count(),
        }
    }
}

/// Free-function form of [`Document::presentation_text`].
pub fn presentation_text(doc: &Document) -> String {
    doc.presentation_text()
}

/// An immutable, ordered document collection with random access by id.
#[derive(Debug, Clone, Default)]
pub struct CorpusHandle {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl CorpusHandle {
    /// Builds a corpus from documents in the given order.
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            doc.validate()
                .map_err(|reason| CorpusError::MalformedRecord {
                    line: i + 1,
                    reason,
                })?;
            if by_id.insert(doc.doc_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    /// Documents in ingestion order.
    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc_id.as_str())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }

    /// Writes the canonical JSONL form (`_id`, optional `title`, `text`).
    pub fn export_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for doc in &self.docs {
            serde_json::to_writer(&mut out, doc)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a CorpusHandle {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.docs.iter()
    }
}

/// Reads a corpus file. Blank lines are skipped; every other line must be a
/// record.
pub fn ingest(path: impl AsRef<Path>, format: CorpusFormat) -> Result<CorpusHandle, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    ingest_reader(reader, format)
}

pub fn ingest_reader<R: BufRead>(
    reader: R,
    format: CorpusFormat,
) -> Result<CorpusHandle, CorpusError> {
    let mut docs = Vec::new();
    let mut by_id = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            CorpusFormat::Jsonl => parse_jsonl_record(&line, line_no)?,
            CorpusFormat::Tsv => parse_tsv_record(&line, line_no)?,
        };
        doc.validate()
            .map_err(|reason| CorpusError::MalformedRecord {
                line: line_no,
                reason,
            })?;
        if by_id.insert(doc.doc_id.clone(), docs.len()).is_some() {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(CorpusHandle { docs, by_id })
}

fn parse_jsonl_record(line: &str, line_no: usize) -> Result<Document, CorpusError> {
    #[derive(Deserialize)]
    struct Record {
        #[serde(rename = "_id")]
        id: String,
        #[serde(default)]
        title: Option<String>,
        text: String,
    }
    let rec: Record = serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    Ok(Document {
        doc_id: rec.id,
        title: rec.title,
        body: rec.text,
    })
}

fn parse_tsv_record(line: &str, line_no: usize) -> Result<Document, CorpusError> {
    let (id, text) = line
        .split_once('\t')
        .ok_or_else(|| CorpusError::MalformedRecord {
            line: line_no,
            reason: "expected doc_id<TAB>text".into(),
        })?;
    Ok(Document::new(id, None, text))
}

/// Draws `n` distinct documents whose presentation text has at least
/// `min_chars` characters. Sampling is without replacement from the eligible
/// pool and fully determined by `seed`.
pub fn sample_documents(
    corpus: &CorpusHandle,
    n: usize,
    min_chars: usize,
    seed: u64,
) -> Result<Vec<String>, CorpusError> {
    let eligible: Vec<&Document> = corpus
        .iter()
        .filter(|d| d.presentation_chars() >= min_chars)
        .collect();
    if eligible.len() < n {
        return Err(CorpusError::InsufficientEligibleDocuments {
            eligible: eligible.len(),
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i].doc_id.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Cursor;

    fn jsonl(lines: &[&str]) -> Cursor<String> {
        Cursor::new(lines.join("\n"))
    }

    fn long_doc(id: &str, chars: usize) -> Document {
        Document::new(id, None, "x".repeat(chars))
    }

    #[test]
    fn ingest_preserves_order() {
        let c = ingest_reader(
            jsonl(&[
                r#"{"_id":"a","text":"one"}"#,
                r#"{"_id":"b","title":"T","text":"two"}"#,
                r#"{"_id":"c","text":"three"}"#,
            ]),
            CorpusFormat::Jsonl,
        )
        .unwrap();
        assert_eq!(c.doc_count(), 3);
        assert_eq!(c.doc_ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(c.get("b").unwrap().title.as_deref(), Some("T"));
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = ingest_reader(
            jsonl(&[r#"{"_id":"x","text":"1"}"#, r#"{"_id":"x","text":"2"}"#]),
            CorpusFormat::Jsonl,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDocId(id) if id == "x"));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = ingest_reader(Cursor::new(""), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.doc_count(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = ingest_reader(
            jsonl(&[r#"{"_id":"a","text":"1"}"#, r#"{"_id":"b"}"#]),
            CorpusFormat::Jsonl,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line: 2, .. }));

        let err = ingest_reader(Cursor::new("a\tok\nno-tab\n"), CorpusFormat::Tsv).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn tsv_has_no_title() {
        let c = ingest_reader(
            Cursor::new("d1\thello world\nd2\ttab\tinside\n"),
            CorpusFormat::Tsv,
        )
        .unwrap();
        assert_eq!(c.get("d1").unwrap().title, None);
        assert_eq!(c.get("d2").unwrap().body, "tab\tinside");
    }

    #[test]
    fn document_needs_title_or_body() {
        let err =
            ingest_reader(jsonl(&[r#"{"_id":"a","text":""}"#]), CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line: 1, .. }));
        let ok = ingest_reader(
            jsonl(&[r#"{"_id":"a","title":"t","text":""}"#]),
            CorpusFormat::Jsonl,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn presentation_text_rules() {
        let d = |t: Option<&str>, b: &str| Document::new("d", t.map(String::from), b);
        assert_eq!(
            d(Some("Gold"), "Price fell.").presentation_text(),
            "Gold Price fell."
        );
        assert_eq!(d(None, "Price fell.").presentation_text(), "Price fell.");
        assert_eq!(d(Some(""), "B").presentation_text(), "B");
        let uni = d(Some("é"), "ñü");
        assert_eq!(
            uni.presentation_chars(),
            uni.presentation_text().chars().count()
        );
        assert_eq!(uni.presentation_chars(), 4);
    }

    #[test]
    fn exhaustive_sample_is_permutation() {
        let c =
            CorpusHandle::from_documents((0..5).map(|i| long_doc(&format!("d{i}"), 300)).collect())
                .unwrap();
        let s = sample_documents(&c, 5, 300, 99).unwrap();
        let set: HashSet<_> = s.iter().cloned().collect();
        assert_eq!(set.len(), 5);
        assert!(c.doc_ids().all(|id| set.contains(id)));
    }

    #[test]
    fn short_document_never_sampled() {
        let mut docs: Vec<_> = (0..9).map(|i| long_doc(&format!("d{i}"), 300)).collect();
        docs.push(long_doc("short", 299));
        let c = CorpusHandle::from_documents(docs).unwrap();
        for seed in 0..200 {
            let s = sample_documents(&c, 9, 300, seed).unwrap();
            assert!(!s.iter().any(|id| id == "short"));
        }
    }

    #[test]
    fn title_counts_toward_length() {
        // 290 body chars + "title" + space = 296; 294 body chars reaches 300.
        let a = Document::new("a", Some("title".into()), "x".repeat(290));
        let b = Document::new("b", Some("title".into()), "x".repeat(294));
        let c = CorpusHandle::from_documents(vec![a, b]).unwrap();
        assert_eq!(sample_documents(&c, 1, 300, 0).unwrap(), ["b"]);
    }

    #[test]
    fn insufficient_eligible() {
        let c = CorpusHandle::from_documents(vec![
            long_doc("a", 300),
            long_doc("b", 300),
            long_doc("c", 10),
        ])
        .unwrap();
        let err = sample_documents(&c, 3, 300, 1).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::InsufficientEligibleDocuments {
                eligible: 2,
                requested: 3
            }
        ));
    }

    #[test]
    fn sampling_reproducible_and_seed_sensitive() {
        let c = CorpusHandle::from_documents(
            (0..50)
                .map(|i| long_doc(&format!("d{i:02}"), 400))
                .collect(),
        )
        .unwrap();
        assert_eq!(
            sample_documents(&c, 10, 300, 7).unwrap(),
            sample_documents(&c, 10, 300, 7).unwrap()
        );
        let distinct: HashSet<Vec<String>> = (0..100)
            .map(|s| sample_documents(&c, 10, 300, s).unwrap())
            .collect();
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn format_parsing() {
        assert_eq!(
            "jsonl".parse::<CorpusFormat>().unwrap(),
            CorpusFormat::Jsonl
        );
        assert!("csv".parse::<CorpusFormat>().is_err());
    }
}
