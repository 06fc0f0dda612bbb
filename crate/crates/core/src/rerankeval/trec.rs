use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use super::RerankError;
use crate::lexindex::{RankedDoc, Ranking};

/// Graded relevance judgments keyed by query and document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        doc_id: impl Into<String>,
        grade: u32,
    ) -> Result<(), RerankError> {
        let query_id = query_id.into();
        let doc_id = doc_id.into();
        match self
            .judgments
            .entry(query_id.clone())
            .or_default()
            .entry(doc_id.clone())
        {
            Entry::Occupied(_) => Err(RerankError::DuplicateJudgment { query_id, doc_id }),
            Entry::Vacant(v) => {
                v.insert(grade);
                Ok(())
            }
        }
    }

    /// Parses `query_id iteration doc_id grade` lines (whitespace separated).
    pub fn read<R: BufRead>(reader: R) -> Result<Self, RerankError> {
        let mut qrels = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let malformed = |reason: &str| RerankError::MalformedRecord {
                line: idx + 1,
                reason: reason.into(),
            };
            let [qid, _, doc, grade] = fields[..] else {
                return Err(malformed("expected 4 fields: query_id 0 doc_id grade"));
            };
            let grade: u32 = grade
                .parse()
                .map_err(|_| malformed("grade must be a non-negative integer"))?;
            qrels.insert(qid, doc, grade)?;
        }
        Ok(qrels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RerankError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (qid, docs) in &self.judgments {
            for (doc, grade) in docs {
                writeln!(out, "{qid} 0 {doc} {grade}")?;
            }
        }
        Ok(())
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    /// Judgments for one query, if it has any.
    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.judgments.get(query_id)?.get(doc_id).copied()
    }

    /// Judged documents with grade at least `threshold`.
    pub fn num_relevant(&self, query_id: &str, threshold: u32) -> usize {
        self.judgments
            .get(query_id)
            .map_or(0, |docs| docs.values().filter(|&&g| g >= threshold).count())
    }
}

/// Writes `query_id Q0 doc_id rank score tag` rows, sorted by query_id then
/// rank, scores to six decimals.
pub fn write_run<'a, W, I>(rankings: I, tag: &str, mut out: W) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Ranking>,
{
    let mut sorted: Vec<&Ranking> = rankings.into_iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    for ranking in sorted {
        for e in &ranking.entries {
            writeln!(
                out,
                "{} Q0 {} {} {:.6} {tag}",
                ranking.query_id, e.doc_id, e.rank, e.score
            )?;
        }
    }
    Ok(())
}

/// Reads a run file into per-query rankings ordered by rank.
pub fn read_run<R: BufRead>(reader: R) -> Result<BTreeMap<String, Ranking>, RerankError> {
    let mut rows: BTreeMap<String, Vec<RankedDoc>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |reason: &str| RerankError::MalformedRecord {
            line: idx + 1,
            reason: reason.into(),
        };
        let [qid, _, doc, rank, score, _tag] = fields[..] else {
            return Err(malformed(
                "expected 6 fields: query_id Q0 doc_id rank score tag",
            ));
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| malformed("rank must be a positive integer"))?;
        let score: f64 = score
            .parse()
            .map_err(|_| malformed("score must be a number"))?;
        if rank == 0 {
            return Err(malformed("ranks are 1-based"));
        }
        rows.entry(qid.to_string()).or_default().push(RankedDoc {
            doc_id: doc.to_string(),
            score,
            rank,
        });
    }
    Ok(rows
        .into_iter()
        .map(|(qid, mut entries)| {
            entries.sort_by_key(|e| e.rank);
            let ranking = Ranking {
                query_id: qid.clone(),
                entries,
            };
            (qid, ranking)
        })
        .collect())
}

/// Reads `query_id<TAB>query_text` lines in file order.
pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<(String, String)>, RerankError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (qid, text) = line
            .split_once('\t')
            .ok_or_else(|| RerankError::MalformedRecord {
                line: idx + 1,
                reason: "expected query_id<TAB>query_text".into(),
            })?;
        out.push((qid.to_string(), text.to_string()));
    }
    Ok(out)
}
