//! Federated learning simulator with zero-shot data augmentation.
//!
//! Clients in a federation often hold skewed slices of the overall data
//! distribution, which makes the shared model serve some of them much
//! worse than others. This crate implements a remedy that never moves real
//! data: synthesizing surrogate examples directly from a model's
//! batch-normalization statistics and mixing them into training, either on
//! the clients or on the server. Alongside the protocols it provides the
//! measurement tools needed to evaluate them: client-level and class-level
//! fairness metrics, an oracle-based quality check for the synthesized
//! data, and an empirical audit of the privacy leakage chain.
//!
//! Everything is deterministic given a seed: random decisions draw from
//! streams keyed by (seed, domain, round, actor), so parallel and serial
//! execution agree bit for bit, and repeated runs produce byte-identical
//! artifacts.
//!
//! Start with [`harness::run`] for full experiments, or the `examples/`
//! directory for focused entry points per capability.

pub mod error;
pub mod config;
pub mod data;
pub mod dpaudit;
pub mod federation;
pub mod harness;
pub mod hashing;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zsdg;

pub use error::{Error, Result};
