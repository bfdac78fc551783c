//! Desk-scale open-set test-time adaptation (TTA) engine.
//!
//! The crate is organized around four subsystems:
//!
//! - [`nn`]: a from-scratch differentiable MLP classifier with batch
//!   normalization, exact analytic gradients, and a binary checkpoint format.
//! - [`streams`]: synthetic source distributions, corrupted continual-domain
//!   test streams with optional open-set contamination, and tabular ingestion.
//! - [`adapt`]: the adaptation loop itself — paired inference through the
//!   original and adapted models, sample selection, entropy/GCE objectives,
//!   optimizer updates, and multi-round scenario execution.
//! - [`metrics`]: online error rates, selection precision/recall, ROC-based
//!   separation metrics, decreased-confidence statistics, and the per-class
//!   gradient cosine-similarity matrix.
//!
//! Everything is deterministic under explicit seeds: the same configuration
//! always produces bit-identical run logs.

pub mod adapt;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod streams;

pub use linalg::Mat;
