use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::RerankError;
use crate::corpus::{CorpusHandle, Document};
use crate::lexindex::{tokenize, Ranking};
use crate::par;

/// Splits text after `.`, `?` or `!` when followed by whitespace or the end
/// of the text. Delimiters stay with their sentence; surrounding whitespace
/// is trimmed.
pub fn segment_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') && chars.peek().is_none_or(|(_, n)| n.is_whitespace()) {
            let end = i + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Sliding-window passage settings, in sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxpConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for MaxpConfig {
    fn default() -> Self {
        Self {
            window: 10,
            stride: 5,
        }
    }
}

impl MaxpConfig {
    pub fn validate(&self) -> Result<(), RerankError> {
        if self.window < 1 || self.stride < 1 || self.stride > self.window {
            return Err(RerankError::InvalidWindow(format!(
                "need window >= 1 and 1 <= stride <= window, got window={} stride={}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// Overlapping passages of `window` sentences starting every `stride`
/// sentences. A document of at most `window` sentences is a single passage;
/// otherwise a passage starts at every multiple of `stride` below the
/// sentence count.
pub fn maxp_passages(doc_text: &str, config: MaxpConfig) -> Result<Vec<String>, RerankError> {
    config.validate()?;
    let sentences = segment_sentences(doc_text);
    let n = sentences.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n <= config.window {
        return Ok(vec![sentences.join(" ")]);
    }
    Ok((0..n)
        .step_by(config.stride)
        .map(|start| sentences[start..(start + config.window).min(n)].join(" "))
        .collect())
}

/// Assigns a relevance score in `[0, 1]` to a (query, passage) pair.
pub trait RerankScorer: Send + Sync {
    fn score_passage(&self, query: &str, passage: &str) -> Result<f64, RerankError>;

    fn score_passages(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, RerankError> {
        passages
            .iter()
            .map(|p| self.score_passage(query, p))
            .collect()
    }

    /// Whether `score_passage` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Token-overlap F1 between query and passage (bag-of-tokens, lowercased).
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl RerankScorer for LexicalScorer {
    fn score_passage(&self, query: &str, passage: &str) -> Result<f64, RerankError> {
        let q = tokenize(query);
        let p = tokenize(passage);
        if q.is_empty() || p.is_empty() {
            return Ok(0.0);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &p {
            *counts.entry(t).or_default() += 1;
        }
        let mut common = 0usize;
        for t in &q {
            if let Some(c) = counts.get_mut(t.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    common += 1;
                }
            }
        }
        if common == 0 {
            return Ok(0.0);
        }
        let precision = common as f64 / p.len() as f64;
        let recall = common as f64 / q.len() as f64;
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Scores passages through an HTTP endpoint: POST `{"query", "passages"}`,
/// response is a JSON array of reals in `[0, 1]`, one per passage.
pub struct RemoteScorer {
    url: String,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
        }
    }
}

impl RerankScorer for RemoteScorer {
    fn score_passage(&self, query: &str, passage: &str) -> Result<f64, RerankError> {
        Ok(self.score_passages(query, &[passage.to_string()])?[0])
    }

    fn score_passages(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, RerankError> {
        let body = serde_json::json!({ "query": query, "passages": passages }).to_string();
        let mut resp = self
            .agent
            .post(&self.url)
            .content_type("application/json")
            .send(body)
            .map_err(|e| RerankError::Scorer(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| RerankError::Scorer(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(RerankError::Scorer(format!("HTTP {status}: {text}")));
        }
        let scores: Vec<f64> = serde_json::from_str(&text)
            .map_err(|e| RerankError::Scorer(format!("malformed body: {e}")))?;
        if scores.len() != passages.len() {
            return Err(RerankError::Scorer(format!(
                "{} scores for {} passages",
                scores.len(),
                passages.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(RerankError::Scorer(format!("score {s} outside [0, 1]")));
        }
        Ok(scores)
    }
}

/// Reranks first-stage candidates with a passage scorer.
pub struct Reranker<'a> {
    pub scorer: &'a dyn RerankScorer,
    pub maxp: MaxpConfig,
    /// Upper bound on documents scored concurrently.
    pub workers: usize,
}

impl<'a> Reranker<'a> {
    pub fn new(scorer: &'a dyn RerankScorer) -> Self {
        Self {
            scorer,
            maxp: MaxpConfig::default(),
            workers: 8,
        }
    }

    /// The best passage score of the document. First-stage scores play no
    /// part.
    pub fn score_document(&self, query: &str, doc: &Document) -> Result<f64, RerankError> {
        let passages = maxp_passages(&doc.presentation_text(), self.maxp)?;
        if passages.is_empty() {
            return Err(RerankError::EmptyDocument(doc.doc_id.clone()));
        }
        let scores = self.scorer.score_passages(query, &passages)?;
        Ok(scores.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Rescores every candidate and re-sorts. The candidate set is unchanged.
    pub fn rerank(
        &self,
        query_id: &str,
        query: &str,
        candidates: &Ranking,
        corpus: &CorpusHandle,
    ) -> Result<Ranking, RerankError> {
        let docs = candidates
            .entries
            .iter()
            .map(|e| {
                corpus
                    .get(&e.doc_id)
                    .ok_or_else(|| RerankError::UnknownDocId(e.doc_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let workers = if self.scorer.concurrent() {
            self.workers
        } else {
            1
        };
        let scores = par::bounded_map(&docs, workers, |doc| self.score_document(query, doc));
        let scored = docs
            .iter()
            .zip(scores)
            .map(|(doc, s)| s.map(|s| (doc.doc_id.clone(), s)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Ranking::from_scores(query_id, scored))
    }
}

pub fn score_document(
    scorer: &dyn RerankScorer,
    query: &str,
    doc: &Document,
    maxp: MaxpConfig,
) -> Result<f64, RerankError> {
    Reranker {
        maxp,
        ..Reranker::new(scorer)
    }
    .score_document(query, doc)
}

pub fn rerank(
    scorer: &dyn RerankScorer,
    query_id: &str,
    query: &str,
    candidates: &Ranking,
    corpus: &CorpusHandle,
    maxp: MaxpConfig,
) -> Result<Ranking, RerankError> {
    Reranker {
        maxp,
        ..Reranker::new(scorer)
    }
    .rerank(query_id, query, candidates, corpus)
}
