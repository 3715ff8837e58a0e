//! Multi-task Gaussian process regression over aggregated observations.
//!
//! Observations may be averages of a latent function over intervals, boxes,
//! or 2-D polygons, with a different support shape and size per task and a
//! different likelihood per task (Gaussian, Poisson, heteroscedastic
//! Gaussian). Tasks share a set of latent GPs through a linear model of
//! coregionalisation; inference is stochastic variational with inducing
//! points placed at the latent-process level, trained by a variational EM
//! loop with Adam on minibatches.
//!
//! Module map:
//!
//! - [`supports`]: observation regions, measures, quadrature
//! - [`kernels`]: the EQ kernel and its integrated forms
//! - [`lmc`]: coregionalised covariances and inducing-variable blocks
//! - [`likelihoods`]: per-task observation models
//! - [`inference`]: ELBO, gradients, Adam, variational EM
//! - [`predict`]: posterior prediction and evaluation metrics
//! - [`data`]: synthetic experiments, aggregation, k-means, file formats

pub mod data;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod likelihoods;
pub mod lmc;
pub mod predict;
pub mod supports;

pub use error::{Error, Result};
