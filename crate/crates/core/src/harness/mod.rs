//! Datasets, optimization, training, persistence, configuration and
//! reporting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod report;
pub mod run;
pub mod train;
