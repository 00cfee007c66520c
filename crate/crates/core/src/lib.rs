//! Phonetic syllabification as binary sequence labeling.
//!
//! A word's phone sequence is labeled position by position: label 1 means a
//! syllable boundary follows that phone. The labeler is a BiLSTM + CNN
//! encoder projected to two emission scores per position, decoded by either
//! a linear-chain CRF or an independent softmax head. Forward and backward
//! passes are written by hand; training is plain Adam with global-norm
//! clipping and early stopping on development-set word accuracy.

pub mod checkpoint;
pub mod crf;
pub mod lexicon;
pub mod network;
pub mod synthetic;
pub mod tensor;
pub mod training;

/// Scalar type used throughout. `f64` by default; the `single-precision`
/// feature switches to `f32` (checkpoints always store `f64`).
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;
