//! Instruction-corpus curation: embed, cluster, select diverse subsets,
//! pair near-duplicates and merge them behind a quality gate.

pub mod baselines;
pub mod clustering;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod fsio;
pub mod hashing;
pub mod http;
pub mod merging;
pub mod pairing;
pub mod scoring;
pub mod pipeline;
pub mod report;
pub mod selection;
pub mod synthetic;
#[doc(hidden)]
pub mod testing;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/pairing.md")]
    mod pairing {}
    #[doc = include_str!("../../../book/src/merging.md")]
    mod merging {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
