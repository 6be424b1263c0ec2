//! Multigraph geometric matrix completion.
//!
//! Joint imputation of missing feature entries and transductive
//! classification of partially labeled rows. Several population graphs, one
//! per meta-feature, each drive a recurrent graph-convolution branch
//! (Chebyshev spectral filter feeding a non-autoregressive LSTM); the branch
//! predictions are fused row-wise by self-attention, and the whole stack is
//! trained end-to-end against a three-term masked objective: graph smoothness,
//! masked reconstruction, and masked cross-entropy.
//!
//! Built on an in-crate tape autodiff over dense f64 matrices; no GPU, no
//! external tensor runtime.

pub mod attention;
pub mod autodiff;
pub mod baselines;
pub mod branch;
pub mod cheb;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod lstm;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{MgmcError, Result};
pub use matrix::Matrix;
