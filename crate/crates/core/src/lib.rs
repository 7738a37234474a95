//! Synthetic contrastive training data for text embedders, end to end.
//!
//! The crate covers generating (query, positive, negative) triples through an
//! OpenAI-compatible chat endpoint ([`synth`], [`gateway`]), a small hashed
//! n-gram encoder trained with a contrastive loss ([`embedder`], [`trainer`]),
//! a frozen-encoder task suite ([`eval`]), and a factorial design that trains
//! one model per subset of data categories to measure how each category moves
//! each metric ([`influence`], [`report`]).
//!
//! [`fixtures`] builds a small offline world with known effects. It backs the
//! tests and the examples in the guide under `book/`.

pub mod embedder;
pub mod eval;
pub mod fixtures;
pub mod gateway;
pub mod import;
pub mod influence;
pub mod model;
pub mod report;
pub mod synth;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/influence.md")]
    mod influence {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
