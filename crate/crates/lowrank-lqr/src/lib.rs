//! Episodic learning of low-rank linear dynamics for finite-horizon LQR.
//!
//! The crate is organized around the pipeline of the learner:
//! [`control`] holds the Riccati machinery, [`env`] the ground-truth
//! system generator and simulator, [`estimator`] the PCA-projected ridge
//! estimator and its confidence regions, [`learner`] the OFU episode loop,
//! and [`harness`] the experiment configs, CSV output, and CLI commands.

pub mod control;
pub mod env;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod learner;
pub mod util;

pub use error::{Error, Result};
