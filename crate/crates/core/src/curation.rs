//! Likelihood filtering, BM25 negative mining and training-triple output.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::generator::{mean_of, GeneratedQuery};
use crate::lexindex::InvertedIndex;
use crate::par;

pub const DEFAULT_TOP_K: usize = 10_000;
pub const DEFAULT_NEGATIVE_POOL: usize = 1000;
const MAX_SAMPLE_MATCHES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("query has no token log-probabilities")]
    EmptyTokenList,
    #[error("negative mining needs at least two indexed documents")]
    CorpusTooSmall,
    #[error("generation set is empty")]
    EmptyGenerationSet,
    #[error("invalid curation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub query: String,
    pub positive_doc_id: String,
    pub negative_doc_id: String,
    pub p_q: f64,
    /// The negative came from the whole corpus because the query's BM25
    /// pool held nothing but the positive.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub negative_from_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub top_k: usize,
    pub negative_pool_size: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            negative_pool_size: DEFAULT_NEGATIVE_POOL,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.top_k < 1 {
            return Err(CurationError::InvalidConfig(
                "top_k must be at least 1".into(),
            ));
        }
        if self.negative_pool_size < 2 {
            return Err(CurationError::InvalidConfig(
                "negative_pool_size must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// The mean token log-probability of a generated question.
pub fn mean_logprob(gq: &GeneratedQuery) -> Result<f64, CurationError> {
    mean_of(&gq.token_logprobs).ok_or(CurationError::EmptyTokenList)
}

fn by_likelihood(a: &GeneratedQuery, b: &GeneratedQuery) -> Ordering {
    b.mean_logprob
        .total_cmp(&a.mean_logprob)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// The `k` most likely queries, most likely first; equal likelihoods are
/// ordered by doc_id.
pub fn select_top_k(queries: &[GeneratedQuery], k: usize) -> Vec<GeneratedQuery> {
    let mut sorted = queries.to_vec();
    sorted.sort_by(by_likelihood);
    sorted.truncate(k);
    sorted
}

/// A mined negative and whether it came from the whole-corpus fallback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeChoice {
    pub doc_id: String,
    pub fallback: bool,
}

fn salted_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Picks one document uniformly from the query's top-`pool_size` BM25
/// results, never the positive. The draw depends only on `(seed, salt)`.
pub fn mine_negative(
    index: &InvertedIndex,
    query: &str,
    positive_doc_id: &str,
    pool_size: usize,
    seed: u64,
    salt: &str,
) -> Result<NegativeChoice, CurationError> {
    if index.doc_count() < 2 {
        return Err(CurationError::CorpusTooSmall);
    }
    let mut rng = salted_rng(seed, salt);
    let ranking = index.search("", query, pool_size);
    let pool: Vec<&str> = ranking
        .entries
        .iter()
        .map(|e| e.doc_id.as_str())
        .filter(|id| *id != positive_doc_id)
        .collect();
    if !pool.is_empty() {
        let pick = pool[rng.random_range(0..pool.len())];
        return Ok(NegativeChoice {
            doc_id: pick.to_string(),
            fallback: false,
        });
    }
    let others: Vec<&String> = index
        .doc_ids()
        .iter()
        .filter(|id| *id != positive_doc_id)
        .collect();
    Ok(NegativeChoice {
        doc_id: others[rng.random_range(0..others.len())].clone(),
        fallback: true,
    })
}

/// Keeps the `config.top_k` most likely queries and pairs each with a mined
/// negative. Output follows [`select_top_k`] order.
pub fn build_triples(
    queries: &[GeneratedQuery],
    index: &InvertedIndex,
    config: &CurationConfig,
) -> Result<Vec<TrainingTriple>, CurationError> {
    config.validate()?;
    if queries.is_empty() {
        return Err(CurationError::EmptyGenerationSet);
    }
    let kept = select_top_k(queries, config.top_k);
    par::bounded_map(&kept, 8, |gq| {
        let neg = mine_negative(
            index,
            &gq.question,
            &gq.doc_id,
            config.negative_pool_size,
            config.seed,
            &gq.doc_id,
        )?;
        if neg.fallback {
            log::warn!("negative for {} drawn from the whole corpus", gq.doc_id);
        }
        Ok(TrainingTriple {
            query: gq.question.clone(),
            positive_doc_id: gq.doc_id.clone(),
            negative_doc_id: neg.doc_id,
            p_q: gq.mean_logprob,
            negative_from_fallback: neg.fallback,
        })
    })
    .into_iter()
    .collect()
}

/// `query<TAB>positive<TAB>negative<TAB>p_q` with p_q to six decimals.
/// Tabs and newlines inside queries become spaces.
pub fn write_triples_tsv<W: Write>(triples: &[TrainingTriple], mut out: W) -> io::Result<()> {
    for t in triples {
        let query: String = t
            .query
            .chars()
            .map(|c| {
                if matches!(c, '\t' | '\n' | '\r') {
                    ' '
                } else {
                    c
                }
            })
            .collect();
        writeln!(
            out,
            "{query}\t{}\t{}\t{:.6}",
            t.positive_doc_id, t.negative_doc_id, t.p_q
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub generated_unique: usize,
    pub matched: usize,
    pub match_rate: f64,
    /// Up to 20 matched questions (normalized, sorted).
    pub sample_matches: Vec<String>,
}

/// Lowercases, collapses whitespace and drops trailing question marks.
pub fn normalize_question(q: &str) -> String {
    let collapsed = q
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    collapsed.trim_end_matches('?').trim_end().to_string()
}

/// Counts distinct normalized generated questions that also occur among the
/// normalized reference questions.
pub fn overlap_report<G: AsRef<str>, R: AsRef<str>>(
    generated: &[G],
    reference: &[R],
) -> OverlapStats {
    let refs: HashSet<String> = reference
        .iter()
        .map(|r| normalize_question(r.as_ref()))
        .collect();
    let unique: BTreeSet<String> = generated
        .iter()
        .map(|g| normalize_question(g.as_ref()))
        .collect();
    let matches: Vec<String> = unique
        .iter()
        .filter(|q| refs.contains(*q))
        .cloned()
        .collect();
    OverlapStats {
        generated_unique: unique.len(),
        matched: matches.len(),
        match_rate: matches.len() as f64 / unique.len().max(1) as f64,
        sample_matches: matches.into_iter().take(MAX_SAMPLE_MATCHES).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusHandle, Document};
    use crate::lexindex::Bm25Params;
    use crate::promptkit::PromptMode;
    use proptest::prelude::*;

    fn gq(doc_id: &str, question: &str, logprobs: &[f64]) -> GeneratedQuery {
        GeneratedQuery {
            doc_id: doc_id.into(),
            question: question.into(),
            token_logprobs: logprobs.to_vec(),
            mean_logprob: mean_of(logprobs).unwrap_or(0.0),
            mode: PromptMode::Vanilla,
            discarded_bad_question: None,
        }
    }

    fn index(docs: &[(&str, &str)]) -> InvertedIndex {
        let c = CorpusHandle::from_documents(
            docs.iter()
                .map(|(i, t)| Document::new(*i, None, *t))
                .collect(),
        )
        .unwrap();
        InvertedIndex::build(&c, Bm25Params::default()).unwrap()
    }

    #[test]
    fn mean_logprob_cases() {
        assert_eq!(
            mean_logprob(&gq("d", "q", &[-0.5, -1.0, -1.5])).unwrap(),
            -1.0
        );
        assert_eq!(mean_logprob(&gq("d", "q", &[-2.0])).unwrap(), -2.0);
        assert!(matches!(
            mean_logprob(&gq("d", "q", &[])),
            Err(CurationError::EmptyTokenList)
        ));
    }

    #[test]
    fn top_k_ordering_and_ties() {
        let set = [
            gq("q1", "a", &[-0.2]),
            gq("q2", "b", &[-1.0]),
            gq("q3", "c", &[-0.5]),
        ];
        let ids = |v: Vec<GeneratedQuery>| v.into_iter().map(|q| q.doc_id).collect::<Vec<_>>();
        assert_eq!(ids(select_top_k(&set, 2)), ["q1", "q3"]);
        assert_eq!(ids(select_top_k(&set, 10)), ["q1", "q3", "q2"]);
        let tied = [gq("zz", "a", &[-0.3]), gq("aa", "b", &[-0.3])];
        assert_eq!(ids(select_top_k(&tied, 1)), ["aa"]);
    }

    #[test]
    fn negative_is_deterministic_and_from_pool() {
        let idx = index(&[
            ("p", "apple pie"),
            ("a", "apple tart"),
            ("b", "apple cake"),
            ("z", "steel"),
        ]);
        let first = mine_negative(&idx, "apple", "p", 1000, 7, "p").unwrap();
        for _ in 0..10 {
            assert_eq!(
                mine_negative(&idx, "apple", "p", 1000, 7, "p").unwrap(),
                first
            );
        }
        assert!(["a", "b"].contains(&first.doc_id.as_str()));
        assert!(!first.fallback);
        let picks: HashSet<String> = (0..64)
            .map(|s| {
                mine_negative(&idx, "apple", "p", 1000, s, "p")
                    .unwrap()
                    .doc_id
            })
            .collect();
        assert_eq!(picks.len(), 2);
    }

    #[test]
    fn negative_fallback_when_pool_only_has_positive() {
        let idx = index(&[("p", "unique words"), ("a", "other"), ("b", "stuff")]);
        let neg = mine_negative(&idx, "unique", "p", 1000, 1, "p").unwrap();
        assert!(neg.fallback);
        assert_ne!(neg.doc_id, "p");
        let neg = mine_negative(&idx, "nothing matches", "p", 1000, 1, "p").unwrap();
        assert!(neg.fallback);
    }

    #[test]
    fn one_doc_corpus_too_small() {
        let idx = index(&[("p", "text")]);
        assert!(matches!(
            mine_negative(&idx, "text", "p", 10, 0, "p"),
            Err(CurationError::CorpusTooSmall)
        ));
    }

    #[test]
    fn build_triples_keeps_top_k() {
        let idx = index(&[("d1", "red fox"), ("d2", "red hen"), ("d3", "blue fox")]);
        let set = [
            gq("d1", "red fox", &[-0.1]),
            gq("d2", "red hen", &[-2.0]),
            gq("d3", "blue fox", &[-0.4]),
        ];
        let config = CurationConfig {
            top_k: 2,
            negative_pool_size: 10,
            seed: 3,
        };
        let triples = build_triples(&set, &idx, &config).unwrap();
        assert_eq!(triples.len(), 2);
        assert_eq!(triples[0].positive_doc_id, "d1");
        assert_eq!(triples[1].positive_doc_id, "d3");
        assert!(triples
            .iter()
            .all(|t| t.positive_doc_id != t.negative_doc_id));
        assert_eq!(triples[0].p_q, -0.1);

        let all = build_triples(
            &set,
            &idx,
            &CurationConfig {
                top_k: set.len(),
                ..config.clone()
            },
        )
        .unwrap();
        assert_eq!(all.len(), 3);
        assert!(matches!(
            build_triples(&[], &idx, &config),
            Err(CurationError::EmptyGenerationSet)
        ));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = CurationConfig::default();
        assert_eq!((c.top_k, c.negative_pool_size), (10_000, 1000));
        assert!(CurationConfig {
            top_k: 0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(CurationConfig {
            negative_pool_size: 1,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn triples_tsv_format() {
        let t = TrainingTriple {
            query: "a\tb".into(),
            positive_doc_id: "p".into(),
            negative_doc_id: "n".into(),
            p_q: -0.123_456_78,
            negative_from_fallback: false,
        };
        let mut out = Vec::new();
        write_triples_tsv(&[t], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "a b\tp\tn\t-0.123457\n");
    }

    #[test]
    fn overlap_cases() {
        let s = overlap_report(&["What is X?", "who is y"], &["what is x"]);
        assert_eq!((s.generated_unique, s.matched), (2, 1));
        assert_eq!(s.match_rate, 0.5);
        assert_eq!(s.sample_matches, ["what is x"]);
        let s = overlap_report(&["a", "b"], &[] as &[&str]);
        assert_eq!(s.matched, 0);
        let s = overlap_report(&[] as &[&str], &["a"]);
        assert_eq!((s.generated_unique, s.match_rate), (0, 0.0));
        assert_eq!(
            normalize_question("  Who   IS\tGary Young ?? "),
            "who is gary young"
        );
    }

    fn arb_set() -> impl Strategy<Value = Vec<GeneratedQuery>> {
        prop::collection::vec((0u16..40, -40i32..0), 0..30).prop_map(|rows| {
            let mut seen = HashSet::new();
            rows.into_iter()
                .filter(|(id, _)| seen.insert(*id))
                .map(|(id, lp)| gq(&format!("d{id:02}"), "q", &[f64::from(lp) / 8.0]))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn top_k_idempotent(set in arb_set(), k in 1usize..35) {
            let once = select_top_k(&set, k);
            prop_assert_eq!(select_top_k(&once, k), once);
        }

        #[test]
        fn kept_dominate_discarded(set in arb_set(), k in 1usize..35) {
            let kept = select_top_k(&set, k);
            let kept_ids: HashSet<_> = kept.iter().map(|q| q.doc_id.clone()).collect();
            let min_kept = kept.iter().map(|q| q.mean_logprob).fold(f64::INFINITY, f64::min);
            for q in set.iter().filter(|q| !kept_ids.contains(&q.doc_id)) {
                prop_assert!(min_kept >= q.mean_logprob);
            }
        }
    }
}
