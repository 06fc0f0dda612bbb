//! Second-stage reranking with MaxP passage scoring, TREC file formats and
//! ranking metrics.

mod maxp;
mod metrics;
mod trec;

pub use maxp::{
    maxp_passages, rerank, score_document, segment_sentences, LexicalScorer, MaxpConfig,
    RemoteScorer, RerankScorer, Reranker,
};
pub use metrics::{
    average_precision, evaluate, mrr_at_k, ndcg_at_k, recall_at_k, EvalConfig, Gain, Metric,
    MetricsReport,
};
pub use trec::{read_queries, read_run, write_run, Qrels};

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("unknown doc_id {0:?}")]
    UnknownDocId(String),
    #[error("document {0:?} has no text")]
    EmptyDocument(String),
    #[error("invalid passage window: {0}")]
    InvalidWindow(String),
    #[error("scorer failure: {0}")]
    Scorer(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate judgment for query {query_id:?}, doc {doc_id:?}")]
    DuplicateJudgment { query_id: String, doc_id: String },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}
