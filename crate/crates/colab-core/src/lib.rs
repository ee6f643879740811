//! Desk-scale toolkit for studying learned background context labels in
//! segmentation training.
//!
//! The pieces: a reverse-mode tape autodiff engine over `f64` tensors
//! ([`ndtensor`]), exact Euclidean distance transforms and soft dilated masks
//! ([`geometry`]), the label-construction algebra that turns context
//! probabilities into training targets ([`labeling`]), static context-label
//! generators ([`contextgen`]), small encoder-decoder networks ([`nets`]),
//! segmentation and ROI losses ([`losses`]), the bilevel trainer that learns
//! a context generator jointly with the segmenter ([`metatrain`]), synthetic
//! 2D benchmarks with controlled distractors ([`synthdata`]), and evaluation
//! instruments ([`metrics`]).
//!
//! Everything is deterministic given explicit seeds; no global RNG, no
//! threads inside a training run, `f64` throughout.

pub mod checks;
pub mod contextgen;
pub mod error;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod losses;
pub mod metatrain;
pub mod metrics;
pub mod ndtensor;
pub mod nets;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
pub use ndtensor::{GradMap, Graph, NetworkParams, NodeId, Tensor};
