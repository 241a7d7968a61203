// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse neuron concept erasure on text-embedding features.
//!
//! The crate trains TopK sparse autoencoders on per-token embedding
//! vectors, finds latent neurons that fire on concept prompts but never on
//! their matched "deconcept" counterparts, and erases the concept by
//! subtracting the scaled decoder directions of those neurons from the
//! embeddings.
//!
//! ```text
//! corpus ──train──▶ SaeParams ──identify(pairs)──▶ R_C ──erase(λ)──▶ h_m
//! ```
//!
//! Module map:
//! - [`numerics`]: dense matrix helpers, TopK selection, finite differences
//! - [`sae`]: the TopK SAE (encode, decode, loss, analytic gradients)
//! - [`trainer`]: Adam, dead-latent tracking, AuxK loss, training loop
//! - [`concept`]: activation collection, frequency scoring, neuron ranking
//! - [`erasure`]: manipulation masks, decoder-direction subtraction, reports
//! - [`io`]: tensor files, checkpoints, concept-pair manifests
//! - [`synth`]: planted-dictionary benchmark and brute-force oracles
//! - [`cli`]: the `snce` command line

pub mod cli;
pub mod concept;
pub mod erasure;
mod error;
pub mod gradcheck;
pub mod io;
pub mod numerics;
pub mod sae;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
pub use sae::{SaeConfig, SaeParams, SparseCode};
