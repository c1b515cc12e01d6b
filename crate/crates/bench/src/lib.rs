//! Experiment harness for the cachejoin engines: configuration, sweeps, CSV and
//! plot output, and cost-model prediction files.

pub mod config;
pub mod experiment;
pub mod model;
pub mod plot;
pub mod sweep;
