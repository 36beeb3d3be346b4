//! From-scratch iris recognition stack: a minimal dense-tensor autograd
//! engine, spatial-transformer building blocks, three convolutional networks
//! (grid-regression detector, encoder-decoder segmenter, deep embedder with
//! auxiliary classifiers), binary iris codes with Hamming/cosine matching,
//! verification metrics, and a synthetic eye-image generator that makes the
//! whole pipeline runnable on a single desktop core.
//!
//! Everything numeric is `f32` in NCHW row-major layout; evaluation metrics
//! and oracle-style reductions accumulate in `f64`. All randomness flows from
//! caller-supplied seeded generators, so every artifact (trained model files
//! included) is bit-reproducible for a fixed seed and configuration.

pub mod codec;
pub mod detect;
pub mod embed;
pub mod error;
pub mod eval;
pub mod image;
pub mod model_io;
pub mod nn;
pub mod pipeline;
pub mod segment;
pub mod stn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, TensorId};
