//! Desk-scale laboratory for cross-architecture feature and circuit universality.
//!
//! The crate bundles everything needed to compare what a Transformer and a
//! Mamba-style state space model learn:
//!
//! - [`numerics`]: dense f64 kernels (matmul, SiLU, causal depthwise conv).
//! - [`models`]: forward-only Transformer and Mamba engines with hook sites,
//!   interventions, hand-constructed induction/name-binding models and a
//!   checksummed weight format.
//! - [`harvest`]: activation collection through a shuffle buffer, token corpora
//!   and the planted-dictionary oracle generator.
//! - [`sae`]: sparse autoencoders with closed-form gradients and Adam.
//! - [`mppc`]: the tiled streaming Max Pairwise Pearson Correlation engine and
//!   its reports.
//! - [`patching`]: three-pass path patching and the induction/IOI sweeps.
//! - [`autointerp`]: top-activation evidence, scoring prompts and an HTTP
//!   chat-completion scorer with a persistent cache.
//! - [`pipeline`]: end-to-end drivers shared by the CLI and the acceptance suite.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iteration otherwise.

pub mod autointerp;
pub mod error;
pub mod harvest;
pub mod io;
pub mod models;
pub mod mppc;
pub mod numerics;
pub mod par;
pub mod patching;
pub mod pipeline;
pub mod rng;
pub mod sae;

pub use error::{Error, Result};

/// Version string embedded into every artifact this crate writes.
pub const ARTIFACT_VERSION: &str = concat!("unilab-", env!("CARGO_PKG_VERSION"));
