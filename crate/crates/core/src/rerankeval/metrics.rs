use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Qrels, RerankError};
use crate::lexindex::Ranking;

/// nDCG gain function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `2^grade - 1`
    #[default]
    Exponential,
    /// `grade`
    Linear,
}

impl Gain {
    fn apply(self, grade: u32) -> f64 {
        match self {
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => f64::from(grade),
        }
    }
}

fn grade_of(qrels: &Qrels, query_id: &str, doc_id: &str) -> u32 {
    qrels.grade(query_id, doc_id).unwrap_or(0)
}

/// Reciprocal rank of the first document with grade `>= rel_threshold`
/// among the top `k`; zero when there is none.
pub fn mrr_at_k(ranking: &Ranking, qrels: &Qrels, k: usize, rel_threshold: u32) -> f64 {
    ranking
        .entries
        .iter()
        .take(k)
        .position(|e| grade_of(qrels, &ranking.query_id, &e.doc_id) >= rel_threshold)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Average precision over the whole ranking, normalised by the number of
/// relevant documents in the judgments (retrieved or not).
pub fn average_precision(ranking: &Ranking, qrels: &Qrels, rel_threshold: u32) -> f64 {
    let total = qrels.num_relevant(&ranking.query_id, rel_threshold);
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, e) in ranking.entries.iter().enumerate() {
        if grade_of(qrels, &ranking.query_id, &e.doc_id) >= rel_threshold {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total as f64
}

/// Normalised discounted cumulative gain at `k`, using `log2(rank + 1)`
/// discounts. The ideal ordering is built from all judged grades.
pub fn ndcg_at_k(ranking: &Ranking, qrels: &Qrels, k: usize, gain: Gain) -> f64 {
    let dcg: f64 = ranking
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| gain.apply(grade_of(qrels, &ranking.query_id, &e.doc_id)) / discount(i))
        .sum();
    let mut ideal: Vec<u32> = qrels
        .judgments(&ranking.query_id)
        .map(|j| j.values().copied().collect())
        .unwrap_or_default();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.apply(g) / discount(i))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn discount(zero_based_rank: usize) -> f64 {
    ((zero_based_rank + 2) as f64).log2()
}

/// Fraction of relevant documents retrieved in the top `k`.
pub fn recall_at_k(ranking: &Ranking, qrels: &Qrels, k: usize, rel_threshold: u32) -> f64 {
    let total = qrels.num_relevant(&ranking.query_id, rel_threshold);
    if total == 0 {
        return 0.0;
    }
    let found = ranking
        .entries
        .iter()
        .take(k)
        .filter(|e| grade_of(qrels, &ranking.query_id, &e.doc_id) >= rel_threshold)
        .count();
    found as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mrr(usize),
    Map,
    Ndcg(usize),
    Recall(usize),
}

impl FromStr for Metric {
    type Err = RerankError;

    /// Accepts `mrr@K`, `map`, `ndcg@K` and `recall@K` with `K >= 1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || RerankError::UnknownMetric(s.to_string());
        if s == "map" {
            return Ok(Metric::Map);
        }
        let (name, k) = s.split_once('@').ok_or_else(unknown)?;
        let k: usize = k.parse().ok().filter(|&k| k >= 1).ok_or_else(unknown)?;
        match name {
            "mrr" => Ok(Metric::Mrr(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" => Ok(Metric::Recall(k)),
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Map => f.write_str("map"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl Metric {
    pub fn compute(self, ranking: &Ranking, qrels: &Qrels, rel_threshold: u32, gain: Gain) -> f64 {
        match self {
            Metric::Mrr(k) => mrr_at_k(ranking, qrels, k, rel_threshold),
            Metric::Map => average_precision(ranking, qrels, rel_threshold),
            Metric::Ndcg(k) => ndcg_at_k(ranking, qrels, k, gain),
            Metric::Recall(k) => recall_at_k(ranking, qrels, k, rel_threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    /// Minimum grade counted as relevant by mrr, map and recall.
    pub rel_threshold: u32,
    pub gain: Gain,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: ["mrr@10", "map", "ndcg@10", "ndcg@20", "recall@1000"]
                .map(String::from)
                .to_vec(),
            rel_threshold: 1,
            gain: Gain::Exponential,
        }
    }
}

impl EvalConfig {
    pub fn parsed_metrics(&self) -> Result<Vec<Metric>, RerankError> {
        self.metrics.iter().map(|m| m.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_queries: usize,
    /// Mean over every query in the judgments.
    pub metrics: BTreeMap<String, f64>,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Scores a run against judgments. Every judged query counts, with an empty
/// ranking when the run lacks it; queries without judgments are ignored.
pub fn evaluate(
    run: &BTreeMap<String, Ranking>,
    qrels: &Qrels,
    config: &EvalConfig,
) -> Result<MetricsReport, RerankError> {
    let metrics = config.parsed_metrics()?;
    let mut per_query = BTreeMap::new();
    for qid in qrels.query_ids() {
        let empty;
        let ranking = match run.get(qid) {
            Some(r) => r,
            None => {
                empty = Ranking {
                    query_id: qid.to_string(),
                    entries: Vec::new(),
                };
                &empty
            }
        };
        let values: BTreeMap<String, f64> = metrics
            .iter()
            .map(|m| {
                (
                    m.to_string(),
                    m.compute(ranking, qrels, config.rel_threshold, config.gain),
                )
            })
            .collect();
        per_query.insert(qid.to_string(), values);
    }
    let n = per_query.len();
    let aggregate = metrics
        .iter()
        .map(|m| {
            let name = m.to_string();
            let sum: f64 = per_query
                .values()
                .map(|v: &BTreeMap<String, f64>| v[&name])
                .sum();
            (name, if n == 0 { 0.0 } else { sum / n as f64 })
        })
        .collect();
    Ok(MetricsReport {
        num_queries: n,
        metrics: aggregate,
        per_query,
    })
}
