//! Shared-parameter Transformer bi-encoder with poly attention and an affine
//! compression layer.

mod checkpoint;
mod config;
mod model;
mod tokenizer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::EncoderConfig;
pub use model::{
    poly_attend, score_predict, score_train, Bound, Dropout, EncoderModel, EncoderOutput, Param,
    ParamId, PolyAttention, ScoreMode,
};
pub use tokenizer::{TokenSequence, Vocab};

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// First id assigned to vocabulary words.
pub const FIRST_WORD_ID: u32 = 4;
