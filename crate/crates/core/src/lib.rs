//! Stance-detection machine annotation.
//!
//! The crate covers the whole loop: load benchmark corpora ([`corpus`]),
//! render prompts across a variation grid ([`prompt`]), query a
//! chat-completion backend with caching and bounded concurrency
//! ([`annotate`]), map generations to labels ([`decoder`]), build
//! adversarial multi-target samples ([`multitarget`]), score predictions
//! ([`metrics`]) and distill everything into a hashed n-gram student
//! ([`student`]).
//!
//! Data-parallel loops go through [`exec::Execution`]; with the default
//! `parallel` feature they run on rayon, otherwise sequentially.

pub mod annotate;
pub mod corpus;
pub mod decoder;
pub mod exec;
pub mod label;
pub mod metrics;
pub mod multitarget;
pub mod prompt;
pub mod student;
pub mod synthetic;

pub use corpus::{Corpus, Split, StanceExample};
pub use label::{Decoded, StanceLabel};
pub use prompt::PromptAxes;
