//! Quantization-aware training for domain generalization at desk scale.
//!
//! The crate trains small MLP classifiers on synthetic multi-domain data with
//! a leave-one-domain-out protocol, switches on per-channel fake quantization
//! partway through training, and measures what that does to out-of-domain
//! accuracy, training stability and loss-landscape flatness. Quantized models
//! can be combined into logit-averaging ensembles.
//!
//! Module map:
//! - [`tensor`]: dense tensors and the reverse-mode tape
//! - [`nn`]: MLP, cross-entropy, SGD/Adam
//! - [`quant`]: quantizer, LSQ gradients, PTQ, incremental freezing, export
//! - [`data`]: generators, CSV ingestion, leave-one-domain-out splits
//! - [`trainer`]: ERM/QAT loop, checkpoints, model selection, stability
//! - [`analysis`]: flatness, Hessian-vector products, Taylor residuals
//! - [`ensemble`]: ensemble prediction and member fan-out
//! - [`experiment`]: multi-seed sweeps shared by the CLI and acceptance suite
//! - [`par`]: rayon-backed fan-out with a sequential fallback

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod par;
pub mod quant;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use par::Execution;
pub use tensor::{Tape, Tensor, Var};
