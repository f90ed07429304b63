//! Dual-branch graph encoder with two-level domain alignment (DETA) for
//! discrete-time, graph-based survival prediction.
//!
//! The crate is organized along the pipeline:
//!
//! - [`autodiff`]: dense-tensor reverse-mode differentiation and optimizers
//! - [`graphs`]: graph data model, KNN construction, shortest-path sets
//! - [`encoder`]: message-passing + shortest-path branches, hazard heads,
//!   domain classifier, checkpoints
//! - [`survival`]: discrete hazard/survival math, C-index, Kaplan-Meier,
//!   log-rank test
//! - [`alignment`]: pseudo-label coupling losses and adversarial feature
//!   perturbation
//! - [`trainer`]: two-stage training (source pre-training, then graph domain
//!   adaptation) and evaluation
//! - [`synthdata`]: paired source/target synthetic datasets with controllable
//!   shift
//! - [`report`]: CSV and SVG emission for metrics, traces, and curves

pub mod alignment;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod graphs;
pub mod report;
pub mod survival;
pub mod synthdata;
pub mod trainer;

pub use error::{DetaError, Result};
