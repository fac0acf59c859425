//! Online workflow: text and semantic retrieval, candidate merge, semantic
//! backfill and post-retrieval filtering with a linear ranker.

mod engine;
mod pool;
mod ranker;

pub use engine::*;
pub use pool::*;
pub use ranker::*;

pub const DEFAULT_K_SEM: usize = 100;
pub const DEFAULT_K_TEXT: usize = 100;
pub const DEFAULT_N_OUT: usize = 20;
