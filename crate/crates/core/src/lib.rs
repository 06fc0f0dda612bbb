//! Synthetic training data for neural rerankers: sample documents, prompt a
//! language model for questions, keep the likeliest ones, mine BM25
//! negatives, then rerank and evaluate.

pub mod corpus;
pub mod curation;
pub mod generator;
pub mod lexindex;
mod par;
pub mod pipeline;
pub mod promptkit;
pub mod rerankeval;

// Runs the guide's code samples as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/bm25.md")]
    mod bm25 {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/curation.md")]
    mod curation {}
    #[doc = include_str!("../../../book/src/reranking.md")]
    mod reranking {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
