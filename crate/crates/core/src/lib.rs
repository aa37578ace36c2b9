//! Cluster-guided expert routing and degradation-aware frequency modulation
//! for all-in-one image restoration, with the synthetic data, training and
//! analysis tooling needed to exercise it at desk scale.

// `Var` arithmetic is by-value methods on a graph handle, not operator traits;
// negated comparisons deliberately reject NaN; `is_multiple_of` postdates the
// minimum supported Rust version.
#![allow(
    clippy::should_implement_trait,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::manual_is_multiple_of,
    clippy::needless_range_loop
)]

pub mod autograd;
pub mod degrade;
pub mod diagnostics;
pub mod error;
pub mod frequency;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod routing;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
