//! Toolkit for domain-adapted quantum code generation at desk scale.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`corpus`]: instruction/code corpora in line-delimited JSON.
//! - [`tinyformer`]: a decoder-only micro-transformer with LoRA adapters on
//!   the attention query and value projections.
//! - [`retrieval`]: dense retrieval and few-shot context assembly.
//! - [`decode`]: temperature scaling and nucleus sampling.
//! - [`backend`]: mock, local toy-model and remote generation backends.
//! - [`harness`]: sandboxed execution, Pass@k and report emission.

pub mod backend;
pub mod category;
pub mod corpus;
pub mod decode;
pub mod harness;
pub mod retrieval;
pub mod tensor_io;
pub mod tinyformer;
pub mod tokens;

pub use category::TaskCategory;
pub use tokens::{TokenCounter, WhitespaceCounter};
