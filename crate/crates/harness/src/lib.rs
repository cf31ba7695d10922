//! Corpus handling, run configuration, checkpoints, metrics and the
//! end-to-end pipeline around `sparsetune-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{FinetuneMode, Run};
