//! Multimodal bag-of-patches prognosis modeling at desk scale.
//!
//! The crate covers the full pipeline: a reverse-mode tape over dense
//! tensors, a tiny ViT patch encoder with masked-autoencoder pretraining and
//! a supervised morphology head, condition-token transformer fusion with
//! gated MIL pooling, the training recipe (AdamW, cosine schedule, weighted
//! smoothed cross-entropy, manifold mixup), a synthetic cohort generator with
//! an on-disk format, and a cross-validation benchmark harness with exact
//! small-sample statistics.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (`f32`/`f64`); the
//! pipeline itself is pinned to [`Real`] (`f64`) so runs are bit-reproducible
//! and finite-difference checks are meaningful.

pub mod autodiff;
pub mod cohort;
pub mod encoder;
pub mod fusion;
pub mod injection;
pub mod error;
pub mod eval;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the end-to-end pipeline.
pub type Real = f64;
/// Tensor specialisations for the two supported widths.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
/// Tape recording `Real` arithmetic.
pub type RealTape = autodiff::Tape<Real>;
