//! Relevance-to-utility document rewriting for retrieval-augmented generation.
//!
//! The crate covers the data side of training a small document rewriter that
//! sits between a retriever and a generator:
//!
//! - [`supervision`] expands each example into one teacher call per document
//!   and assembles SFT records from the rewrites found in the teacher's output.
//! - [`preference`] builds set-level DPO pairs from per-document answer correctness.
//! - [`harness`] runs naive and bridged pipelines and scores them.
//! - [`lab`] checks the probabilistic identities behind the rewrite objective
//!   exactly, on small enumerable worlds.
//!
//! [`gateway`] is the shared LLM client; [`synthetic`] provides a deterministic
//! corpus and rule-based mock model for offline runs.

pub mod config;
pub mod gateway;
pub mod harness;
pub mod lab;
pub mod metrics;
pub mod par;
pub mod preference;
pub mod prompts;
pub mod qa;
pub mod supervision;
pub mod synthetic;
