//! Progressive task-specific multi-task adaptation.
//!
//! Gradient-based task similarity picks which tasks share low-rank adapters
//! at each depth of a frozen backbone. Early stages share one adapter across
//! all tasks, later stages split into progressively smaller task groups,
//! and the last stage feeds task-specific heads.

pub mod artifacts;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod grouping;
pub mod network;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod similarity;
pub mod synthetic;
pub mod tensor;
pub mod tglora;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};
