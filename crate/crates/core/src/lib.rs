//! Engine for weakly-supervised video anomaly understanding.
//!
//! The crate is organized as a pipeline of small, mostly pure stages:
//!
//! * [`corpus`] loads manifests, cached frame embeddings and text encoders.
//! * [`scorer`] turns frame embeddings and a pair of textual anchors into a
//!   coarse anomaly curve and summarizes it into a [`scorer::CoarsePrior`].
//! * [`gateway`] gives uniform chat-completion access to an LLM backend
//!   (OpenAI-compatible HTTP or a scripted mock).
//! * [`ape`] runs the prompt optimization loop for anchors and VAU prompts
//!   using only video-level labels.
//! * [`refiner`] queries the multimodal model segment by segment and turns
//!   verdicts into step curves.
//! * [`signal`] smooths, fuses and resamples curves.
//! * [`metrics`] implements the evaluation protocols.
//! * [`pipeline`] wires everything into resumable, persisted stages.
//!
//! Data-parallel loops go through [`par::Exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod ape;
pub mod assets;
pub mod corpus;
pub mod demo;
pub mod gateway;
pub mod hashing;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod refiner;
pub mod scorer;
pub mod signal;

pub use corpus::{EmbeddingMatrix, Label, Manifest, Split, TextEmbedding, VideoRecord};
pub use scorer::{AnchorPair, AnomalyCurve, CoarsePrior};
