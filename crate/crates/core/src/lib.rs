//! Semi-stream equijoin of a fast stream against a disk-resident master relation,
//! with sequential, parallel and overlapped-parallel CACHEJOIN engines.

mod error;

pub mod cost_model;
pub mod engines;
pub mod join_structs;
pub mod master_store;
pub mod stream_source;

pub use error::{Error, Result};
