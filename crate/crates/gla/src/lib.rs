//! Two-view correspondence outlier rejection at desk scale.
//!
//! The crate trains and evaluates a permutation-equivariant inlier/outlier
//! classifier over putative feature correspondences, built on:
//!
//! - [`diffcore`] — a self-contained reverse-mode differentiation core over
//!   dense N×C matrices, with gradient checking and Adam;
//! - [`blocks`] — context normalization, inlier-attention normalization and
//!   the attention block assembled from them;
//! - [`guidedloss`] — F-score algebra and the measurement-driven class-weight
//!   scheduler, plus fixed-weight comparison losses;
//! - [`network`] — the coarse-to-fine classifier with auxiliary supervision;
//! - [`geometry`] — essential-matrix estimation, epipolar residuals and a
//!   RANSAC baseline;
//! - [`data`] — deterministic synthetic two-view datasets with ground-truth
//!   geometry and a binary on-disk format;
//! - [`harness`] — training loop, per-pair metrics, retained-correspondence
//!   sweeps and baseline comparison.
//!
//! See the `examples/` directory for one runnable walkthrough per capability
//! and the `gla` binary for the scriptable command-line frontend.

// Negated float comparisons (`!(x > 0.0)`) are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod guidedloss;
pub mod harness;
pub mod network;
mod util;

pub use error::{Error, Result};
