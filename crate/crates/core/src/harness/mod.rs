//! Everything around the math: data, training, evaluation, sweeps, persistence.

pub mod config;
pub mod data;
pub mod fetch;
pub mod checkpoint;
pub mod eval;
pub mod train;
pub mod sweep;
pub mod plot;
