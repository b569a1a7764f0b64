//! A single-layer, query-pivoted transformer trained on synthetic factual
//! corpora, with the analytic objects that describe its SGD dynamics and a
//! continual-pretraining harness for studying forgetting.
//!
//! Module map:
//! * [`corpus`]: world generation, biography rendering, frequency statistics.
//! * [`model`]: parameters `(Y, z)`, forward pass, closed-form SGD, decoding.
//! * [`theory`]: reference state, Bayes oracle, Jacobian probes, conserved
//!   quantities, diversity index.
//! * [`continual`]: EWC, stored and generative replay, the CPT trainer.
//! * [`eval`]: knowledge metrics, curve smoothing, plateau KL.
//! * [`experiment`]: config-driven pipeline and report generation.

pub mod continual;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod seed;
pub mod theory;

pub use error::{Error, Result};
