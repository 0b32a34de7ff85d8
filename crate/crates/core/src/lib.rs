//! Anomaly detection with normalizing-flow surrogate anomalies.
//!
//! A flow is fit to the normal class with a Jacobian penalty that keeps the
//! learned density close to the base density. Points drawn from the tail of
//! the Gaussian base distribution are pushed through the flow to obtain
//! surrogate anomalies, and a binary classifier is trained on the normal
//! samples against the union of real and surrogate anomalies.
//!
//! Module map:
//!
//! - [`ndmath`]: seeded RNG, Gaussian/chi-square helpers, finite differences
//! - [`gradnet`]: dense networks with hand-written backward passes, Adam(W)
//! - [`flows`]: affine and rational-quadratic coupling layers, [`flows::FlowStack`]
//! - [`nftrain`]: likelihood training with the Jacobian regularizer
//! - [`tailgen`]: tail-region latent sampling and surrogate generation
//! - [`classifier`]: the dense anomaly classifier and its training loop
//! - [`dataeval`]: synthetic data, CSV ingestion, ROC AUC, density grids
//! - [`modelfile`]: binary model persistence
//! - [`pipeline`]: end-to-end runs and the anomaly-count experiment grid
//! - [`par`]: rayon fan-out with a sequential fallback

pub mod classifier;
pub mod dataeval;
mod error;
pub mod flows;
pub mod gradnet;
pub mod modelfile;
pub mod ndmath;
pub mod nftrain;
pub mod par;
pub mod pipeline;
pub mod tailgen;

pub use error::{Error, Result};

/// Dense row-major matrix used for sample batches.
pub type Mat = ndarray::Array2<f64>;
/// Dense vector.
pub type Vector = ndarray::Array1<f64>;
