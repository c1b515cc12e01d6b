//! The three join engines and their shared run plumbing.

mod cachejoin;
mod common;
mod oracle;
mod parallel;
mod steps;

use std::sync::Arc;

pub use cachejoin::run_cachejoin;
pub use common::{
    checksum_of, multiset, EngineConfig, EngineKind, Feed, IterationStats, JoinedRecord, OutputSink, Phase,
    RunReport, SinkSpec, SinkSummary, StopCondition, JOINED_RECORD_WIDTH,
};
pub use oracle::oracle_join;
pub use steps::{sp_step, DpState, ProbeOutcome};

use crate::error::Result;
use crate::master_store::MasterStore;
use crate::stream_source::StreamSource;

/// P-CACHEJOIN: SP and DP on separate workers, connected by I_B.
pub fn run_pcachejoin(store: Arc<MasterStore>, source: Box<dyn StreamSource>, config: &EngineConfig) -> Result<RunReport> {
    parallel::run_parallel(EngineKind::PCacheJoin, store, source, config)
}

/// OP-CACHEJOIN: P-CACHEJOIN plus two disk buffers filled by loader workers
/// at the oldest and newest ends of Q.
pub fn run_opcachejoin(store: Arc<MasterStore>, source: Box<dyn StreamSource>, config: &EngineConfig) -> Result<RunReport> {
    parallel::run_parallel(EngineKind::OpCacheJoin, store, source, config)
}

pub fn run_engine(
    kind: EngineKind,
    store: Arc<MasterStore>,
    source: Box<dyn StreamSource>,
    config: &EngineConfig,
) -> Result<RunReport> {
    match kind {
        EngineKind::CacheJoin => run_cachejoin(store, source, config),
        EngineKind::PCacheJoin => run_pcachejoin(store, source, config),
        EngineKind::OpCacheJoin => run_opcachejoin(store, source, config),
    }
}
