//! spin-lab: self-play fine-tuning on exactly enumerable tabular sequence
//! policies.
//!
//! The universe is small enough to enumerate, so every quantity the training
//! dynamics depend on — log-likelihoods, the pair objective, KL and JSD
//! divergences, the closed-form tilted next iterate — is computed exactly and
//! can be cross-checked against an independent oracle. The crate provides:
//!
//! - [`task`]: the toy universe, synthetic tasks, and datasets
//! - [`policy`]: tabular softmax autoregressive policies with exact
//!   log-probs, sampling, and analytic gradients
//! - [`losses`]: the admissible loss family, the self-play pair objective
//!   (exact and mini-batch), SFT NLL, and the DPO pair loss
//! - [`selfplay`]: the iterative training loop with dataset accumulation
//! - [`theory`]: executable oracles for stationarity, the tilted opponent,
//!   the scalar minimization lemma, and the JSD lower bound
//! - [`metrics`]: divergence reports and the metrics.csv trajectory record
//! - [`cli`]: the `spin-lab` command-line surface

pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod selfplay;
pub mod task;
pub mod theory;

pub use error::{Error, Result};
