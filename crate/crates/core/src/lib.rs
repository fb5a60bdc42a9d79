//! Deterministic desk-scale simulator of collaborative training over
//! heterogeneous multi-site cohorts: siloed and pretrained baselines,
//! centralized data sharing, FedAvg, and (cyclic) institutional
//! incremental learning, with class-equalizing augmentation and the
//! usual holdout metrics.

pub mod augment;
pub mod cohort;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod incremental;
pub mod io;
pub mod nn;
pub mod presets;
pub mod seeding;

pub use error::{Error, Result};
