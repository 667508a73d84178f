//! Multi-modal mixture-of-experts classifier for three-way cohort
//! classification (PD / iRBD / HC) from volumetric imaging and tabular
//! clinical/serum measurements.
//!
//! The crate is self-contained and deterministic end to end:
//!
//! - [`autodiff`] — reverse-mode automatic differentiation on a flat tape,
//!   with a persistent [`autodiff::ParamStore`] for trainable parameters.
//! - [`encoders`] — volumetric transformer encoders (patchify, multi-head
//!   self-attention, feed-forward blocks, mean pooling) and a small MLP
//!   encoder for the tabular features.
//! - [`moe`] — per-modality experts, the clinically driven gating network,
//!   weighted logit fusion, and the gate-balance regularizer.
//! - [`model`] — assembles encoders, experts, and gate into one model with a
//!   named, deterministically initialized parameter set.
//! - [`data`] — synthetic cohort generation, preprocessing (imputation,
//!   z-scoring, one-hot encoding), stratified splitting, and a checksummed
//!   binary container format.
//! - [`training`] — Adam with cosine-annealed learning rate, gradient
//!   accumulation, best-checkpoint tracking, and checkpoint serialization.
//! - [`evaluation`] — confusion-matrix metrics, expert-utilization reports
//!   (CSV + SVG), and the ablation harness.
//!
//! All randomness flows through seeded ChaCha8 streams derived from
//! `(seed, label)` pairs, so every artifact — generated cohorts, trained
//! checkpoints, metrics files — is byte-reproducible for a given seed and
//! configuration.

pub mod autodiff;
mod bytes;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
mod init;
pub mod model;
pub mod moe;
pub mod rng;
pub mod training;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
