//! Speaker-verification back-end toolkit operating on precomputed
//! utterance embeddings.
//!
//! The pipeline pieces: dataset bookkeeping and file formats ([`data`]),
//! a deterministic synthetic generator matching the PLDA generative model
//! ([`synth`]), embedding-space transforms — per-dataset centering,
//! LDA/LSDA, covariance alignment, in-domain whitening, length
//! normalization ([`transforms`]) — two-covariance PLDA training and
//! scoring ([`plda`]), cosine/PLDA trial scoring with adaptive symmetric
//! score normalization ([`scoring`]), logistic-regression calibration and
//! equal-weight fusion ([`calibration`]), detection metrics ([`metrics`]),
//! and standalone numeric kernels for encoding layers and losses
//! ([`encoders`]). [`recipe`] chains the stages from a flat text file.

pub mod calibration;
pub mod data;
pub mod encoders;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod plda;
pub mod recipe;
pub mod scoring;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
