//! Hidden tree Markov models over labeled positional trees.
//!
//! * [`tree`]: tree data model, text format and datasets.
//! * [`model`]: finite top-down and bottom-up parameter containers, sampling
//!   and complete-data log-probabilities.
//! * [`inference`]: upward-downward message passing and a brute-force oracle.
//! * [`em`]: expectation maximization for the finite models.
//! * [`hdp`]: the infinite bottom-up model under a truncated hierarchical
//!   Dirichlet process prior, trained by blocked Gibbs sampling.

pub mod em;
pub mod error;
pub mod hdp;
pub mod inference;
pub mod math;
pub mod model;
pub mod tree;

pub use em::{fit, EmConfig, EmTrace, Fit};
pub use error::{Error, Result};
pub use hdp::{run_chain, run_chains, ChainConfig, GibbsState, HdpHypers};
pub use inference::{brute_force, posteriors, score_dataset, Posteriors, ScoreReport};
pub use model::{init_random, BuParams, Model, ModelKind, TdParams};
pub use tree::{load_dataset, parse_tree, serialize_tree, Dataset, LabeledTree, Subtree};
