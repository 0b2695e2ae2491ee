//! Building blocks for a French BERT-style encoder: streaming corpus
//! cleaning, BPE sub-word vocabularies, dynamic MLM batching, a transformer
//! encoder with hand-written backward pass, an AdamW pretraining loop,
//! classification heads for sentence and sentence-pair tasks, and word sense
//! disambiguation classifiers. `harness` ties the downstream tasks together
//! behind one benchmark driver.

pub mod bpe;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod mlm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod synth;
pub mod wsd;

pub use error::{Error, Result};

/// Version string written into manifests and checkpoints.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
