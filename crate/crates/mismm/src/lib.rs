//! Maximum-margin classifiers for weakly supervised bags of distributional
//! instances.
//!
//! Data sets are collections of *bags*, each holding one or more
//! *distributional instances* (an instance is an empirical sample matrix).
//! Labels are observed at the bag level only: a bag is positive exactly when
//! at least one of its instances is positive. Training such a classifier is a
//! non-convex maximum-margin problem; this crate provides
//!
//! - an iterative heuristic that alternates between a convex dual
//!   sub-problem and instance re-selection ([`heuristic`]),
//! - a direct branch-and-bound solver over a mixed-integer reformulation on
//!   Nyström embeddings ([`miqp`]),
//! - single-instance and summary-feature baselines ([`baselines`]),
//! - simulation generators with ground-truth instance labels ([`simulate`]),
//! - AUROC, bag-level cross-validation, grid search, and a benchmark
//!   harness ([`eval`]).

pub mod baselines;
pub mod data;
pub mod dual;
pub mod error;
pub mod eval;
pub mod heuristic;
pub mod kernel;
pub mod miqp;
pub mod model;
pub mod nystrom;
pub mod qp;
pub mod simulate;

pub use data::{Bag, Dataset, DistInstance, ScaleParams};
pub use error::{Error, Result};
pub use kernel::{GramMatrix, KernelSpec};

/// Name of the seedable random number generator used throughout.
pub const RNG_ALGORITHM: &str = "ChaCha12";
