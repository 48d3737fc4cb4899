//! Retrieval-augmented classification with swappable memory.
//!
//! Queries are classified against per-class image and text prototypes after
//! their nearest neighbors from image and text memory banks are folded in by a
//! small trainable cross-attention layer. Banks are immutable snapshots, so
//! memory can be replaced, expanded or shrunk at inference time without
//! retraining.

pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod harness;
pub mod incremental;
pub mod integration;
pub mod memory;
pub mod prototypes;
pub mod retrieval;
pub mod synth;
pub mod trainer;
pub mod vector;

pub use classifier::{classify, Branches, Classification, Classifier};
pub use error::{Error, Result};
pub use integration::{Branch, IntegrationParams};
pub use memory::{load_bank, save_bank, BankSnapshot, ClassId, MemoryBank, Modality};
pub use prototypes::{consensus_prototypes, PrototypeSet, PrototypeVariant};
pub use retrieval::{top_k, RetrievalResult};
pub use trainer::{train, LabeledQuery, TrainConfig};
