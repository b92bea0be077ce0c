//! Outliers of finite-rank, possibly non-Hermitian perturbations of Hermitian
//! random matrices: where they sit, how fast they converge, and what their
//! fluctuations look like.

pub mod cpx;
pub mod ensemble;
pub mod experiment;
pub mod error;
pub mod fluctuation;
pub mod haar;
pub mod jordan;
pub mod measure;
pub mod outliers;
pub mod resolvent;
pub mod seed;
pub mod small;
pub mod stats;

pub use cpx::C64;
pub use error::{LabError, Result};
