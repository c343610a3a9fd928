//! Neurocache: a fixed-size FIFO cache of compressed transformer states,
//! exact kNN retrieval with retrieval-window expansion, and cache-attention,
//! together with a small decoder stack that uses them.

pub mod attention;
pub mod bench;
pub mod cache;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod recall;
pub mod retrieval;

pub use cache::{CacheBuffer, CacheSnapshot};
pub use error::{Error, Result};
pub use retrieval::{Method, Neighbors, QueryCounter, RetrievalSet};
pub use model::{Model, ModelConfig, Trainable};
