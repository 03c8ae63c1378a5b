//! Multi-agent value-factorization learning with per-agent awareness
//! decomposition.
//!
//! Each agent encodes its local observation-action history with a recurrent
//! network, decomposes that embedding into one diagonal-Gaussian "awareness"
//! distribution per teammate, and computes local action values from the
//! embedding plus sampled awareness. A centralized mixer (VDN, QMIX or a
//! simplified QPLEX) combines local values for temporal-difference training,
//! and a KL regularizer against a centralized posterior estimator shapes the
//! awareness distributions. Execution is fully decentralized.

pub mod agent;
pub mod awareness;
pub mod config;
pub mod diffcore;
pub mod env;
pub mod error;
pub mod mixer;
pub mod trainer;

pub use error::{Error, Result};
