//! Robust graph contrastive learning.
//!
//! This crate trains self-supervised node embeddings whose view
//! transformations are chosen adversarially: a preliminary forward/backward
//! pass yields a signed gradient at every edge-weight slot of the normalized
//! adjacency, and the transformation removes the edges that would lower the
//! contrastive loss the most while inserting the candidate edges that would
//! raise it. The stochastic baselines (uniform and degree-weighted edge
//! removal with feature masking) are the same pipeline with the adversarial
//! rates set to zero.
//!
//! The pieces compose bottom-up:
//!
//! - [`graph`]: immutable graphs, preprocessing, receptive fields, the
//!   synthetic block-model fixture, and dataset I/O.
//! - [`matrix`] / [`tape`]: dense 64-bit values and the reverse-mode tape
//!   whose gradient targets include edge weights.
//! - [`adjacency`]: the differentiable `D^{-1/2}(A + I)D^{-1/2}` operator.
//! - [`encoder`]: the two-layer GCN and the projection head.
//! - [`contrastive`]: cosine similarity and the batched objective.
//! - [`transforms`]: stochastic masking/removal and the gradient-ranked
//!   adversarial edge edits with their candidate sets.
//! - [`trainer`]: the optimization loop covering all four methods.
//! - [`eval`]: linear probes, the linearized surrogate, the greedy evasion
//!   attack, and robust-accuracy reporting.

pub mod adjacency;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
