//! Sequential CACHEJOIN: SP and DP alternate on a single worker.

use std::sync::Arc;
use std::time::Instant;

use crate::engines::common::{
    nanos, EngineConfig, EngineKind, Feeder, IterationStats, OutputSink, Phase, RunReport, SinkTarget,
};
use crate::engines::steps::DpState;
use crate::error::{Error, Result};
use crate::join_structs::FrequencyCache;
use crate::master_store::{MasterStore, Partition};
use crate::stream_source::StreamSource;

pub fn run_cachejoin(store: Arc<MasterStore>, source: Box<dyn StreamSource>, config: &EngineConfig) -> Result<RunReport> {
    if store.record_count() == 0 {
        return Err(Error::EmptyRelation);
    }
    let started = Instant::now();
    let d_b = config.budget.d_b as usize;
    let cache = FrequencyCache::new(config.budget.h_r as usize);
    let target = SinkTarget::open(&config.sink)?;
    let mut sink = OutputSink::new(&target);
    let mut feeder = Feeder::new(source, config);
    let mut dp = DpState::from_config(config);
    let mut partition = Partition::default();
    let mut iterations = Vec::new();
    let mut violations = Vec::new();

    loop {
        let t0 = Instant::now();
        let mut omega_n = 0;
        {
            // SP phase: until H_S is full or S_B runs dry.
            let reader = cache.reader();
            while !dp.store().is_full() {
                let Some(rec) = feeder.pop() else { break };
                match reader.lookup(rec.fkey) {
                    Some(master) => {
                        sink.emit(&rec, &master.payload);
                        omega_n += 1;
                    }
                    None => {
                        dp.store_mut().insert(rec).expect("checked not full");
                    }
                }
            }
        }
        let t_sp = t0.elapsed();
        let draining = feeder.done();

        let Some(key) = dp.store().oldest_key() else {
            if draining {
                if omega_n > 0 {
                    // SP hits after the last probe still belong to an iteration.
                    iterations.push(IterationStats {
                        ordinal: iterations.len() as u64,
                        phase: Phase::Drain,
                        omega_n,
                        omega_s: 0,
                        sp_ns: nanos(t_sp),
                        dp_ns: 0,
                        load_ns: 0,
                        stall_ns: 0,
                        loop_ns: nanos(t0.elapsed()),
                        promotions: 0,
                    });
                }
                break;
            }
            continue;
        };

        let t_dp = Instant::now();
        store.read_partition_into(key, d_b, &mut partition)?;
        let load_ns = nanos(t_dp.elapsed());
        let outcome = dp.dp_step(&partition, &cache, &mut sink);
        let dp_ns = nanos(t_dp.elapsed());

        if config.check_invariants {
            if let Err(e) = dp.store().check_invariants() {
                violations.push(format!("iteration {}: {e}", iterations.len()));
            }
        }
        let ordinal = iterations.len() as u64;
        let phase = if draining {
            Phase::Drain
        } else if (ordinal as usize) < config.warmup_iterations {
            Phase::Warmup
        } else {
            Phase::Steady
        };
        iterations.push(IterationStats {
            ordinal,
            phase,
            omega_n,
            omega_s: outcome.omega_s,
            sp_ns: nanos(t_sp),
            dp_ns,
            load_ns,
            stall_ns: 0,
            loop_ns: nanos(t0.elapsed()),
            promotions: outcome.promotions,
        });
    }

    let sink = sink.finish()?;
    Ok(RunReport {
        engine: EngineKind::CacheJoin,
        total_output: sink.count,
        stream_consumed: feeder.consumed,
        orphans_dropped: dp.orphans_dropped(),
        overflows: feeder.overflows(),
        iterations,
        sink,
        wall_ns: nanos(started.elapsed()),
        invariant_violations: violations,
        cache_snapshot: config.check_invariants.then(|| cache.records()),
        config: format!("{config:?}"),
    })
}
