//! Task-oriented transceiver trained with a class-conditional information
//! bottleneck, with per-class Gaussian likelihood scoring at the receiver for
//! out-of-distribution detection.
//!
//! Layers, bottom-up:
//! - [`gaussian`]: diagonal posteriors, full-covariance class priors, KL and
//!   log-likelihood, and the prior bank refreshed from latent statistics.
//! - [`channel`]: AWGN channel at a given PSNR, peak-power symbol mapping,
//!   symbol-rate latency.
//! - [`codec`]: the learnable encoder / classifier / auxiliary autoencoder.
//! - [`objectives`]: the variational CCIB loss, triplet separation loss and the
//!   VIB / DeepJSCC baselines.
//! - [`ood`]: scoring, reconstruction weighting, thresholded detection, ODIN, AUROC.
//! - [`bound`]: Monte Carlo verification of the variational bound on a toy source.
//! - [`harness`]: data, training loop, evaluation, sweeps, checkpoints, plots.

pub mod bound;
pub mod channel;
pub mod codec;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod objectives;
pub mod ood;
pub mod rng;

pub use channel::ChannelConfig;
pub use error::{Error, Result};
pub use gaussian::{GaussianDiag, GaussianFull, PriorBank};
