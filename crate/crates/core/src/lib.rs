//! Sparse kernel surrogate models of vector-valued functions.
//!
//! Training methods: direct regularized interpolation ([`interpolation`]),
//! greedy Newton-basis approximation ([`vkoga`]) and epsilon-insensitive
//! support vector regression without offset ([`svr`]). Model selection by
//! validation or k-fold cross validation lives in [`selection`], inverse
//! parameter estimation through a trained model in [`inverse`].

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod data;
pub mod error;
pub mod interpolation;
pub mod inverse;
pub mod kernel;
pub mod par;
pub mod selection;
pub mod surrogate;
pub mod svr;
pub mod synthetic;
pub mod vkoga;

pub use data::{scale_outputs, unscale_outputs, Dataset, OutputScaler};
pub use error::{Error, Result};
pub use kernel::{
    distance_matrix, kernel_matrix, DistanceMatrix, KernelFamily, KernelSpec, WendlandSmoothness,
};
pub use surrogate::Surrogate;
