//! Self-supervised hierarchical semantic IDs for documents, plus generative
//! retrieval over them.
//!
//! The crate learns a fixed-length sequence of discrete codes per document
//! by training an encoder-decoder sequence model against a masked-token
//! reconstruction objective, quantizing hidden states against per-position
//! codebooks with straight-through gradients, and growing the ID one
//! position at a time. The same model is then fine-tuned to map query text
//! to document IDs, decoded under a prefix-tree constraint so only real
//! documents can be produced.

pub mod corpus;
pub mod error;
pub mod graph;
pub mod idspace;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use corpus::{Corpus, CorpusOptions, Document, HintMask, Vocabulary};
pub use error::{Error, Result};
pub use idspace::{IdTable, PrefixTree};
pub use model::{Model, ModelConfig, SemanticId};
pub use trainer::{LossReport, TrainConfig};
