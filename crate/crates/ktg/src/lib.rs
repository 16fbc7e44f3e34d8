//! Knowledge-transfer graphs: training, search and tooling on top of
//! `ktg-core`.

pub mod config;
pub mod data;
pub mod document;
pub mod error;
pub mod models;
pub mod optim;
pub mod plot;
pub mod presets;
pub mod report;
pub mod search;
pub mod training;

pub use error::{Error, Result};
