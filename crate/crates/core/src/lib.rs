//! Diffusion models on mixtures of low-rank Gaussians.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: forward-process scale `s_t`, noise level `sigma_t` and loss weights.
//! - [`molrg`]: the ground-truth mixture, its data, marginal density, posterior mean and score.
//! - [`dae`]: low-rank denoisers, their Jacobians and numerical rank.
//! - [`optim`]: training losses, Stiefel SGD, the PCA and K-subspaces oracles.
//! - [`experiments`]: phase grids, GL scores, reverse sampling, rank curves, semantic sweeps.

pub mod dae;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod molrg;
pub mod optim;
pub mod schedule;

pub use error::{Error, Result};

pub type Mat = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
