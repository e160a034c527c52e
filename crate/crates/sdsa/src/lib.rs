//! Spatially aware knowledge-guided carbon-flux models on synthetic data:
//! a process surrogate generates regional datasets, a GRU-attention model
//! trains under physical-consistency penalties at three levels of spatial
//! awareness, and a cross-region matrix evaluates the transfer gap.

pub mod cli;
pub mod config;
pub mod error;
pub mod kgloss;
pub mod levels;
pub mod model;
pub mod ndmath;
pub mod pipeline;
pub mod regions;
pub mod synthgen;

pub use error::{Error, Result};
