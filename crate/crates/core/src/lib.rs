//! Recognition toolkit for multivariate time series recorded by an
//! IMU-enhanced ballpoint pen.
//!
//! The crate covers the whole pipeline:
//!
//! * [`dataio`]: recording parser, alphabets, writer-dependent and
//!   writer-independent k-fold splits.
//! * [`preprocess`]: length normalization and label-preserving augmentation.
//! * [`segment`]: force-based stroke detection and equation splitting.
//! * [`metrics`]: edit distance with alignments, CER/WER/CRR, positional
//!   error histograms and confusion matrices.
//! * [`losses`]: CTC loss and decoders, plus the cross-entropy family used
//!   for single-character classification.
//! * [`netcore`]: a small reverse-mode tape, the CNN+(Bi)LSTM model, Adam and
//!   the training loop.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod netcore;
pub mod preprocess;
pub mod rng;
pub mod segment;

pub use error::{Error, Result};
