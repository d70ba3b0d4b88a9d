//! Online meta-learning of initial conditions for domain adaptation.
//!
//! The crate is framework-free: [`autodiff`] provides a small reverse-mode
//! tape over dense matrices, [`models`] the MLP networks trained on it,
//! [`da`] the base adaptation objectives (DANN, MCD, MME), and [`meta`] the
//! shortest-path-gradient meta-update together with the online, sequential
//! and baseline training loops. [`domains`] generates synthetic multi-domain
//! benchmarks and [`harness`] runs seeded experiment grids from JSON configs.

pub mod autodiff;
pub mod da;
pub mod domains;
pub mod error;
pub mod harness;
pub mod meta;
pub mod models;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
