//! Synthetic network-flow generation with autoregressive symbol models.
//!
//! The pipeline turns flow records into fixed-length symbol sequences
//! ([`codec`]), trains character-level sequence models on them
//! ([`model`], [`train`]) built on a small reverse-mode autodiff engine
//! ([`graph`]), samples new sequences ([`sample`]) and scores how well the
//! decoded flows match the real ones ([`eval`]).

// `!(x > y)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod codec;
pub mod error;
pub mod eval;
pub mod graph;
mod hexfloat;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod pca;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;

pub use codec::{BinningMode, Codebook, SymbolDataset, SymbolSequence};
pub use error::{Error, Result};
pub use eval::{EvalReport, OcsvmModel};
pub use graph::{Graph, NormMode, Var};
pub use ingest::{ColumnKind, ColumnSpec, FlowTable};
pub use model::{Architecture, Model, ModelConfig, ModelParams};
pub use pca::PcaResult;
pub use rng::Rng;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainReport};
