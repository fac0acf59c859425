//! Semantic (ANN) and lexical (BM25) retrieval indexes.

mod ann;
mod inverted;
pub mod text;

pub use ann::*;
pub use inverted::*;
