//! Toy-scale laboratory for gated log-probability-increase (Gated-LPI)
//! neuron attribution on dense and mixture-of-experts transformers.
//!
//! The crate trains matched dense and MoE decoder-only models on a synthetic
//! relational-facts corpus, emits a checkpoint series, scores every FFN
//! (expert) neuron and attention neuron by how much it raises the target
//! log-probability, and tracks how those importance scores evolve:
//! top-set Jaccard stability, positive-gain concentration, layer-profile
//! consistency and cross-step variation. Causal masking of heads and
//! neurons measures the resulting HIT@10 drop.

pub mod attribution;
pub mod dataset;
pub mod error;
pub mod intervention;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
