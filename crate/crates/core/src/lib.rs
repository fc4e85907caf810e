//! Symbolic tree pathfinding with a small decoder-only transformer, and the
//! tooling to take the trained network apart.
//!
//! The crate is split along the lines of the workflow:
//!
//! - [`task`]: random binary trees, goal/path selection, the fixed-width
//!   token layout, and JSONL datasets.
//! - [`oracle`]: exact path/ancestor computations, tree counting, and an
//!   executable backward-chaining reference model.
//! - [`model`]: the transformer itself, with a hand-written backward pass,
//!   AdamW, training, greedy decoding, and an intervention hook contract.
//! - [`interp`]: probes, patching, causal scrubbing, attention knockout,
//!   circuit matrices, direct logit attribution, and skip lenses.

pub mod digest;
pub mod error;
pub mod interp;
pub mod model;
pub mod oracle;
pub mod stats;
pub mod task;

pub use error::{Error, Result};

pub use model::{ActivationCache, InterventionSpec, ModelConfig, Parameters};
pub use task::{TaskInstance, TokenSequence, Tree, Vocabulary};
