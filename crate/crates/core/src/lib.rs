//! Masked speech denoising and prediction pre-training at desk scale.
//!
//! The crate covers the whole pipeline: utterance mixing simulation,
//! MFCC k-means pseudo-labels, a convolutional waveform encoder, a
//! Transformer with gated relative position bias, the masked prediction
//! objective and a small Adam training loop with checkpointing.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod labeler;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod objective;
pub mod signal;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use numeric::{Graph, ParamStore, Real, Tensor, Var};
