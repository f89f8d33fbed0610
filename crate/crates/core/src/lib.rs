//! Native language identification by per-L1 adapter branches over a shared,
//! frozen decoder-only transformer.
//!
//! Each target L1 gets a branch (bottleneck adapters at every layer plus an
//! output head). A document is classified by the branch that assigns it the
//! lowest language-model loss. The fused engine evaluates all branches over
//! one backbone, sharing the computation before the first adapter site.

pub mod adapters;
pub mod bench;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cv;
pub mod error;
pub mod folds;
pub mod fused;
pub mod gpt2;
pub mod svm;
pub mod synth;
pub mod tensor;
pub mod training;

pub use adapters::{AdapterArch, AdapterConfig, L1Branch};
pub use autodiff::{GeluKind, Tape, Var};
pub use gpt2::{Backbone, ModelConfig, TokenSequence};
pub use tensor::Tensor;
