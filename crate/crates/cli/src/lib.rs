//! Command implementations behind the `polyret` binary.

pub mod config;
pub mod evaluate;
pub mod pipeline;
pub mod serve;

pub use config::RunConfig;
