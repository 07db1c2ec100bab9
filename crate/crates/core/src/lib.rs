//! Auxiliary self-supervision for robustness and uncertainty estimation.
//!
//! The crate bundles a small differentiable network core with the
//! experiment procedures built on top of it: PGD adversarial training with
//! an auxiliary rotation loss, common-corruption evaluation, label-noise
//! training with gold loss correction, and one-class anomaly detection from
//! geometric transformation prediction.

pub mod advrobust;
pub mod corruptions;
pub mod dataset;
pub mod diffgraph;
pub mod error;
pub mod harness;
pub mod labelnoise;
pub mod ooddetect;
pub mod report;
pub mod selfsup;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
