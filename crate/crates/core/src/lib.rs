//! Poly-attention bi-encoder retrieval engine.
//!
//! The crate is generic over the floating-point element type through
//! [`Scalar`]; the aliases at the bottom of this file fix it to `f64`, which is
//! what training and the command-line tool use.

pub mod binio;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod index;
pub mod numkernel;
pub mod quantstore;
pub mod retrieval;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numkernel::Tensor<f64>;
pub type Tape64 = numkernel::Tape<f64>;
pub type Encoder = encoder::EncoderModel<f64>;




pub type Ann = index::AnnIndex<f64>;
pub type Store = quantstore::EmbeddingStore<f64>;
pub type QuantParams = quantstore::QuantizationParams<f64>;
pub type Engine = retrieval::SearchEngine<f64>;
