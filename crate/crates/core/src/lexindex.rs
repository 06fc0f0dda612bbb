//! Tokenization, inverted index and Okapi BM25 first-stage retrieval.
//!
//! Scores use the Lucene flavour of Okapi BM25:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q, d) = sum over query tokens t of
//!               idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
//! ```
//!
//! A query token that occurs twice contributes twice.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusHandle;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("unknown doc_id {0:?}")]
    UnknownDocId(String),
    #[error("invalid index snapshot: {0}")]
    InvalidSnapshot(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Lowercases and splits on every non-alphanumeric character.
///
/// ```
/// assert_eq!(inpars::lexindex::tokenize("B-52 bomber"), ["b", "52", "bomber"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// BM25 inverse document frequency. Always positive for `df <= n_docs`.
pub fn idf(n_docs: usize, df: usize) -> f64 {
    let n = n_docs as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// One (document, term frequency) pair. `doc` is the document's position in
/// ascending doc_id order, so postings sorted by `doc` are sorted by doc_id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    /// doc_ids in ascending order.
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_doc_length: f64,
    /// `k1 * (1 - b + b * dl / avgdl)` per document.
    length_norm: Vec<f64>,
    id_lookup: HashMap<String, u32>,
}

impl InvertedIndex {
    /// Indexes the presentation text of every document.
    pub fn build(corpus: &CorpusHandle, params: Bm25Params) -> Result<Self, IndexError> {
        if corpus.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let mut docs: Vec<_> = corpus.iter().collect();
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (pos, doc) in docs.iter().enumerate() {
            let tokens = tokenize(&doc.presentation_text());
            doc_lengths.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for tok in tokens {
                *tf.entry(tok).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: pos as u32,
                    tf: count,
                });
            }
        }
        let doc_ids = docs.into_iter().map(|d| d.doc_id.clone()).collect();
        Ok(Self::assemble(params, doc_ids, doc_lengths, postings))
    }

    fn assemble(
        params: Bm25Params,
        doc_ids: Vec<String>,
        doc_lengths: Vec<u32>,
        postings: BTreeMap<String, Vec<Posting>>,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        let length_norm = doc_lengths
            .iter()
            .map(|&dl| length_norm(params, f64::from(dl), avg_doc_length))
            .collect();
        let id_lookup = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            params,
            doc_ids,
            doc_lengths,
            postings,
            avg_doc_length,
            length_norm,
            id_lookup,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    /// All indexed doc_ids, ascending.
    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.id_lookup.contains_key(doc_id)
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.id_lookup
            .get(doc_id)
            .map(|&i| self.doc_lengths[i as usize])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Postings for `term` as (doc_id, tf), ascending by doc_id.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings.get(term).map_or_else(Vec::new, |list| {
            list.iter()
                .map(|p| (self.doc_ids[p.doc as usize].as_str(), p.tf))
                .collect()
        })
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn term_weight(&self, tf: u32, doc: u32, idf: f64) -> f64 {
        term_contribution(
            self.params,
            idf,
            f64::from(tf),
            self.length_norm[doc as usize],
        )
    }

    /// BM25 score of one document for already-tokenized query terms.
    pub fn bm25_score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64, IndexError> {
        let doc = *self
            .id_lookup
            .get(doc_id)
            .ok_or_else(|| IndexError::UnknownDocId(doc_id.to_string()))?;
        let mut score = 0.0;
        for term in query_tokens {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Ok(i) = list.binary_search_by_key(&doc, |p| p.doc) {
                score += self.term_weight(list[i].tf, doc, idf(self.doc_count(), list.len()));
            }
        }
        Ok(score)
    }

    /// Top-`k` documents for `query` by BM25. Documents scoring zero are left
    /// out, so the result may be shorter than `k`.
    pub fn search(&self, query_id: &str, query: &str, k: usize) -> Ranking {
        let tokens = tokenize(query);
        let mut acc = vec![0.0f64; self.doc_count()];
        let mut touched = Vec::new();
        for term in &tokens {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let w = idf(self.doc_count(), list.len());
            for p in list {
                let slot = &mut acc[p.doc as usize];
                if *slot == 0.0 {
                    touched.push(p.doc);
                }
                *slot += self.term_weight(p.tf, p.doc, w);
            }
        }
        // ascending doc position == ascending doc_id
        let mut hits: Vec<(u32, f64)> = touched
            .into_iter()
            .map(|d| (d, acc[d as usize]))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        let by_rank = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k == 0 {
            hits.clear();
        } else if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, by_rank);
            hits.truncate(k);
        }
        hits.sort_unstable_by(by_rank);
        Ranking::from_sorted(
            query_id,
            hits.into_iter()
                .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
                .collect(),
        )
    }

    /// Writes a self-describing JSON snapshot.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_snapshot(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_snapshot<W: Write>(&self, out: W) -> Result<(), IndexError> {
        let snap = Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            params: self.params,
            doc_ids: self.doc_ids.clone(),
            doc_lengths: self.doc_lengths.clone(),
            postings: self
                .postings
                .iter()
                .map(|(t, l)| (t.clone(), l.iter().map(|p| (p.doc, p.tf)).collect()))
                .collect(),
        };
        serde_json::to_writer(out, &snap).map_err(io::Error::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::read_snapshot(BufReader::new(File::open(path)?))
    }

    pub fn read_snapshot<R: io::Read>(reader: R) -> Result<Self, IndexError> {
        let snap: Snapshot = serde_json::from_reader(reader)
            .map_err(|e| IndexError::InvalidSnapshot(e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(IndexError::InvalidSnapshot(format!(
                "unsupported format {:?}",
                snap.format
            )));
        }
        let n = snap.doc_ids.len();
        if n == 0 || snap.doc_lengths.len() != n {
            return Err(IndexError::InvalidSnapshot(
                "doc table is empty or inconsistent".into(),
            ));
        }
        if snap.doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IndexError::InvalidSnapshot(
                "doc_ids not strictly ascending".into(),
            ));
        }
        let mut postings = BTreeMap::new();
        for (term, list) in snap.postings {
            if list.windows(2).any(|w| w[0].0 >= w[1].0)
                || list.iter().any(|&(d, _)| d as usize >= n)
            {
                return Err(IndexError::InvalidSnapshot(format!(
                    "bad postings for {term:?}"
                )));
            }
            postings.insert(
                term,
                list.into_iter()
                    .map(|(doc, tf)| Posting { doc, tf })
                    .collect(),
            );
        }
        Ok(Self::assemble(
            snap.params,
            snap.doc_ids,
            snap.doc_lengths,
            postings,
        ))
    }
}

const SNAPSHOT_FORMAT: &str = "inpars-bm25-index/1";

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

fn length_norm(params: Bm25Params, dl: f64, avgdl: f64) -> f64 {
    params.k1 * (1.0 - params.b + params.b * dl / avgdl)
}

fn term_contribution(params: Bm25Params, idf: f64, tf: f64, norm: f64) -> f64 {
    idf * (tf * (params.k1 + 1.0)) / (tf + norm)
}

/// One entry of a [`Ranking`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Ordered candidate list for one query. Scores never increase with rank and
/// equal scores are ordered by ascending doc_id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub entries: Vec<RankedDoc>,
}

impl Ranking {
    /// Sorts `(doc_id, score)` pairs into ranking order. Later duplicates of a
    /// doc_id are dropped.
    pub fn from_scores(query_id: impl Into<String>, mut scored: Vec<(String, f64)>) -> Self {
        let mut seen = std::collections::HashSet::new();
        scored.retain(|(id, _)| seen.insert(id.clone()));
        scored.sort_by(compare_scored);
        Self::from_sorted(query_id, scored)
    }

    fn from_sorted(query_id: impl Into<String>, scored: Vec<(String, f64)>) -> Self {
        Self {
            query_id: query_id.into(),
            entries: scored
                .into_iter()
                .enumerate()
                .map(|(i, (doc_id, score))| RankedDoc {
                    doc_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }
}

/// Ranking order: higher score first, then ascending doc_id.
pub fn compare_scored(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}
