//! Human-learning-style domain adaptation for small-scale image
//! re-identification: a teacher-student self-training pipeline with
//! clustering-based pseudo labels, selective teacher imitation, relational
//! structure distillation, and attention-guided erasing, plus the synthetic
//! benchmark, evaluation protocol, and experiment harness around it.

pub mod ablate;
pub mod aulm;
pub mod config;
pub mod datagen;
pub mod ema;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod plot;
pub mod pseudo;
pub mod rundir;
pub mod train;

pub use config::RunConfig;
pub use error::{HliError, Result};
