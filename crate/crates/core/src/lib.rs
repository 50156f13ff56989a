//! Temporal action segmentation with decoupled frame identification and
//! transcript reasoning, fused by Viterbi duration alignment.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape.
//! * [`attention`]: dilated sliding-window attention, pyramid-pooled global
//!   attention, and cross-attention.
//! * [`model`]: convolutional stem, identification encoder, transcript decoder.
//! * [`objectives`]: label smoothing, input noise, and the training losses.
//! * [`alignment`]: Viterbi duration assignment for a fixed transcript.
//! * [`metrics`]: frame accuracy, segmental Edit and F1@τ.
//! * [`data`]: file formats, checkpoints and the synthetic dataset generator.
//! * [`trainer`]: the two-phase decoupled training loop and evaluation.

pub mod alignment;
pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
