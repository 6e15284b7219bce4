//! Syntactic probes, counterfactual embeddings and causal intervention
//! analysis for layered language models.

pub mod bridge;
pub mod corpora;
pub mod counterfactual;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod probes;
pub mod tensor_file;
pub mod toy;
pub mod treebank;

pub use error::{Error, Result};
