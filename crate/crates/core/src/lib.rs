//! Synthetic marketplace, toy encoders and the training, distillation,
//! retrieval and evaluation stages of a keyphrase-retrieval pipeline.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distillation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
