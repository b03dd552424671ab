//! Multi-fidelity autoencoder surrogates with multi-split conformal
//! prediction bands.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`] dense matrices, Jacobi SVD, PCA frames.
//! * [`nn`] fully connected networks, reverse-mode gradients, Adam.
//! * [`mfae`] LF pretraining, frozen-encoder fine-tuning and prediction.
//! * [`conformal`] modulated bands and multi-split calibration.
//! * [`lofi`] synthetic low-fidelity generators (modal filtering, FPS, ...).
//! * [`data`] snapshot sets, CSV I/O, splitting, normalization, metrics.
//! * [`pipeline`] the file-driven batch commands behind the `mfcp` binary.

pub mod conformal;
pub mod data;
pub mod linalg;
pub mod lofi;
pub mod mfae;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use linalg::Matrix;
