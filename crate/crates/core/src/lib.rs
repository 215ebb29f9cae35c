//! Neighborhood-distribution losses built from f-divergences and softmax
//! similarity kernels.
//!
//! A loss in this family is the mean, over anchors `i`, of `D(p(.|i) || q(.|i))`
//! where `p` is a fixed supervisory neighborhood distribution and `q` is a
//! learned one. `D` is one of KL, total variation, Jensen-Shannon or squared
//! Hellinger; `q` comes either from a softmax over pairwise similarities of
//! learned features (angular or distance kernel) or from cluster-probability
//! overlap.
//!
//! The crate ships analytic gradients for every path, three training engines
//! ([`trainers::run_sne`], [`trainers::run_cluster`], [`trainers::run_supcon`]),
//! evaluation metrics, finite-difference checking, and the file formats used by
//! the `bicon` command line tool.

pub mod config;
pub mod data;
pub mod divergence;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod trainers;

pub use divergence::{divergence, divergence_grad_q, Divergence};
pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec, NeighborhoodDistribution, Role};

/// Dense row-major matrix used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;
