//! Selective inference for sparse Gaussian graphical models.
//!
//! The crate estimates the edge set of a Gaussian graphical model with
//! randomized neighborhood selection (one L1-penalized, ridge-stabilized,
//! randomized regression per node) and then produces selection-adjusted
//! p-values and confidence intervals for every selected precision-matrix
//! entry. Inference conditions on the observed selection event: the
//! conditional law of one cross-product entry is a tilted Wishart slice
//! multiplied by a per-node adjustment factor, which is evaluated on a grid
//! with a barrier-penalized Laplace approximation.
//!
//! Modules follow the pipeline:
//! - [`simdata`]: sparse precision matrices and Gaussian samples with known
//!   ground truth,
//! - [`selector`]: the randomized nodewise Lasso solves and the AND/OR edge
//!   combination,
//! - [`adjustment`]: the selection-adjusted density machinery,
//! - [`inference`]: pivots, p-values and confidence intervals (plus the
//!   data-splitting and naive baselines),
//! - [`metrics`]: coverage / length / F1 evaluation,
//! - [`harness`]: the Monte-Carlo benchmark driver.

pub mod adjustment;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod selector;
pub mod simdata;

mod error;

pub use error::{Error, Result};



pub use selector::{
    FitConfig, FitResult, NodewiseSolution, RandomizationSpec, Rule, SelectionEvent, SuffStat,
};
pub use simdata::{Dataset, GraphSpec};
