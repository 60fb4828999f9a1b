//! Uncertainty quantification for regression models.
//!
//! The crate bundles several families of probabilistic regressors behind one
//! output type, [`GaussianPrediction`], so that every model can be scored by
//! the same evaluation suite:
//!
//! - [`gpr`]: exact Gaussian process regression with marginal-likelihood
//!   hyperparameter optimization.
//! - [`nnet`]: small feedforward networks with hand-written backpropagation.
//! - [`bnn`]: Metropolis-Hastings, mean-field variational inference, Stein
//!   variational gradient descent and MC dropout over network parameters.
//! - [`ensemble`]: deep ensembles of Gaussian-output networks.
//! - [`sngp`]: spectral-normalized feature extractors with a random Fourier
//!   feature Gaussian process head, and GPR on learned features.
//! - [`evaluation`]: calibration curves, ECE, u-pooling, NLL, sparsification
//!   and isotonic recalibration.
//! - [`acquisition`]: EFF, U and EI learning functions and an adaptive
//!   surrogate refinement loop.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod acquisition;
pub mod bnn;
pub mod cli;
pub mod data;
pub mod ensemble;
mod error;
pub mod evaluation;
pub mod gpr;
pub mod kernels;
pub mod nnet;
pub mod numerics;
mod prediction;
pub mod sngp;

pub use error::{Error, Result};
pub use prediction::GaussianPrediction;
