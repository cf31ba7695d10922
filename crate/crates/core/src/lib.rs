//! Sparse fine-tuning of transformer language models with block-wise token
//! elimination, low-rank adapters and memory accounting.

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod ledger;
pub mod model;
pub mod ops;
pub mod optim;
pub mod predictor;
pub mod sparsity;
pub mod tape;
pub mod train;
pub mod tensor;

pub use element::{DType, Element};
pub use error::{Error, Result};
pub use ledger::{Category, Ledger, LedgerReport, ScopeTag};
pub use sparsity::{BlockGrid, BlockScoreMatrix, Component, SparsityPattern, ThresholdSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
