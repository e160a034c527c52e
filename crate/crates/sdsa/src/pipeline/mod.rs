//! Orchestration: dataset I/O, preprocessing, training protocol, optimizer,
//! persistence, and cross-region evaluation.

pub mod bundle;
pub mod data;
pub mod eval;
pub mod optim;
pub mod preprocess;
pub mod train;
