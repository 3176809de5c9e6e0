//! Hierarchical verification tree (HVT) speculative beam decoding over
//! exactly enumerable synthetic language models.
//!
//! The crate provides:
//!
//! * [`model`]: the [`LanguageModel`](model::LanguageModel) abstraction
//!   with instrumented forward-pass counting, plus deterministic table and
//!   softmax implementations and the model/corpus file formats;
//! * [`tree`]: speculative draft tries with per-node scores and priorities;
//! * [`engine`]: priority-ordered verification with subtree pruning,
//!   residual recovery, and the multi-beam decode loop;
//! * [`baselines`]: greedy, multinomial, and flat token-level speculative
//!   decoding (the lossless reference);
//! * [`bench`]: the benchmark runner, exact/Monte-Carlo output-distribution
//!   tests, and CSV/JSON report emission.
//!
//! Forward passes of the target model are the cost unit throughout: they are
//! deterministic, hardware-independent, and the quantity the decoding
//! algorithms actually control.

pub mod baselines;
pub mod bench;
pub mod engine;
pub mod model;
pub mod report;
pub mod tree;

pub use engine::{decode, decode_traced, hvt_step, step_metrics, HvtConfig, StepStats};
pub use model::{LanguageModel, ModelSpec, Token, TokenSeq};
pub use report::DecodeReport;
pub use tree::{build_draft_tree, DraftTree, NodeId, NodeStatus, PriorityMode};
