//! Reproduction surface: run configuration, dataset ingestion, experiment
//! records, ablations, and CSV/SVG emission.

pub mod ablate;
pub mod config;
pub mod data;
pub mod emit;
pub mod records;
