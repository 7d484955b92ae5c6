//! GDMSR: preference-guided denoising of social graphs for social
//! recommendation.
//!
//! The pipeline is `dataset` (load, filter, split, inject noise) ->
//! `denoiser` (joint training with the curriculum, final pruning) ->
//! `recommender` (GCN + BPR on the pruned graph) -> `eval` (real-plus-N
//! ranking metrics). `experiment` drives whole studies from a JSON config.

mod error;

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod eval;
pub mod experiment;
pub mod graphconv;
pub mod recommender;
pub mod synth;

pub use error::{Error, Result};

/// `git describe` of the source tree this crate was built from.
pub const BUILD: &str = env!("GDMSR_GIT_DESCRIBE");
