//! The SP and DP phase bodies, shared by all three engines.

use ahash::AHashMap;

use crate::engines::common::{EngineConfig, OutputSink};
use crate::join_structs::{FrequencyCache, StreamStore};
use crate::master_store::Partition;
use crate::stream_source::StreamRecord;

/// Probes each record of `batch` against H_R once. Hits are joined into `sink`
/// (bumping their counters); misses are appended to `misses` in input order.
/// Returns the number of hits.
pub fn sp_step(
    cache: &FrequencyCache,
    batch: &[StreamRecord],
    sink: &mut OutputSink,
    misses: &mut Vec<StreamRecord>,
) -> u64 {
    let reader = cache.reader();
    let mut hits = 0;
    for rec in batch {
        match reader.lookup(rec.fkey) {
            Some(master) => {
                sink.emit(rec, &master.payload);
                hits += 1;
            }
            None => misses.push(*rec),
        }
    }
    hits
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub omega_s: u64,
    pub promotions: u64,
    pub orphans_dropped: u64,
}

/// State owned by the DP phase: H_S/Q plus frequency-detection settings.
#[derive(Debug)]
pub struct DpState {
    store: StreamStore,
    threshold: u64,
    accumulated: Option<AHashMap<u32, u64>>,
    orphan_policy: bool,
    orphans_dropped: u64,
}

impl DpState {
    pub fn new(capacity: usize, threshold: u64) -> Self {
        Self {
            store: StreamStore::new(capacity),
            threshold,
            accumulated: None,
            orphan_policy: true,
            orphans_dropped: 0,
        }
    }

    pub fn from_config(config: &EngineConfig) -> Self {
        let mut s = Self::new(config.budget.stream_capacity(), config.threshold);
        s.orphan_policy = config.orphan_policy;
        if config.accumulate_frequency {
            s.accumulated = Some(AHashMap::new());
        }
        s
    }

    pub fn with_orphan_policy(mut self, on: bool) -> Self {
        self.orphan_policy = on;
        self
    }

    pub fn with_accumulation(mut self, on: bool) -> Self {
        self.accumulated = on.then(AHashMap::new);
        self
    }

    pub fn store(&self) -> &StreamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut StreamStore {
        &mut self.store
    }

    pub fn orphans_dropped(&self) -> u64 {
        self.orphans_dropped
    }

    /// Probes every record of `partition` into H_S. Matches are joined into `sink`
    /// and removed from H_S and Q; a disk record whose match frequency exceeds the
    /// threshold is promoted into `cache`.
    pub fn dp_step(&mut self, partition: &Partition, cache: &FrequencyCache, sink: &mut OutputSink) -> ProbeOutcome {
        let mut out = ProbeOutcome::default();
        for i in 0..partition.len() {
            let key = partition.key(i);
            let payload = partition.payload(i);
            let n = self.store.match_and_evict_with(key, |s| sink.emit(s, payload)) as u64;
            if n == 0 {
                continue;
            }
            out.omega_s += n;
            let freq = match &mut self.accumulated {
                Some(acc) => {
                    let f = acc.entry(key).or_insert(0);
                    *f += n;
                    *f
                }
                None => n,
            };
            if freq > self.threshold {
                cache.promote(&partition.record(i), freq);
                out.promotions += 1;
                if let Some(acc) = &mut self.accumulated {
                    acc.remove(&key);
                }
            }
        }
        // The requested key is absent from the relation: its records can never match.
        if self.orphan_policy && !partition.is_empty() && !partition.starts_at_requested_key() {
            let dropped = self.store.strike_orphans(partition.start_key()) as u64;
            self.orphans_dropped += dropped;
            out.orphans_dropped = dropped;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::common::SinkTarget;
    use crate::master_store::{generate_master, open_master, MasterRecord};

    fn srec(fkey: u32, tag: u8) -> StreamRecord {
        StreamRecord {
            fkey,
            payload: [tag; 16],
        }
    }

    fn collecting() -> OutputSink {
        OutputSink::new(&SinkTarget::Collect)
    }

    #[test]
    fn sp_with_empty_cache_misses_everything() {
        let cache = FrequencyCache::new(10);
        let batch: Vec<_> = (1..=5).map(|k| srec(k, 0)).collect();
        let mut misses = Vec::new();
        let mut sink = collecting();
        assert_eq!(sp_step(&cache, &batch, &mut sink, &mut misses), 0);
        assert_eq!(misses, batch);
    }

    #[test]
    fn sp_joins_cached_keys() {
        let cache = FrequencyCache::new(10);
        let master = MasterRecord {
            key: 4,
            payload: [9; 116],
        };
        cache.promote(&master, 3);
        let batch = vec![srec(4, 1), srec(5, 2), srec(4, 3), srec(6, 4), srec(4, 5)];
        let mut misses = Vec::new();
        let mut sink = collecting();
        assert_eq!(sp_step(&cache, &batch, &mut sink, &mut misses), 3);
        assert_eq!(misses, vec![srec(5, 2), srec(6, 4)]);
        let out = sink.finish().unwrap().records.unwrap();
        assert!(out.iter().all(|r| r.fkey == 4 && r.master_payload == [9; 116]));
        assert_eq!(cache.frequency(4), Some(6));
    }

    #[test]
    fn dp_promotes_above_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        generate_master(100, 1, &path).unwrap();
        let store = open_master(&path).unwrap();
        let cache = FrequencyCache::new(10);
        let mut dp = DpState::new(100, 2);
        for t in 0..3 {
            dp.store_mut().insert(srec(10, t)).unwrap();
        }
        dp.store_mut().insert(srec(20, 0)).unwrap();
        let disjoint = store.read_partition(50, 10).unwrap();
        let mut sink = collecting();
        assert_eq!(dp.dp_step(&disjoint, &cache, &mut sink).omega_s, 0);
        let p = store.read_partition(10, 5).unwrap();
        let outcome = dp.dp_step(&p, &cache, &mut sink);
        assert_eq!((outcome.omega_s, outcome.promotions), (3, 1));
        assert!(cache.contains(10));
        assert_eq!(cache.lookup(10).unwrap(), store.record_at(9).unwrap());
        assert_eq!(dp.store().len(), 1);
        assert_eq!(sink.finish().unwrap().count, 3);
    }

    #[test]
    fn accumulated_frequency_promotes_across_probes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        generate_master(100, 1, &path).unwrap();
        let store = open_master(&path).unwrap();
        let cache = FrequencyCache::new(10);
        let mut dp = DpState::new(100, 2).with_accumulation(true);
        let p = store.read_partition(10, 1).unwrap();
        let mut sink = collecting();
        for round in 0..2u8 {
            dp.store_mut().insert(srec(10, round)).unwrap();
            dp.store_mut().insert(srec(10, round + 10)).unwrap();
            let o = dp.dp_step(&p, &cache, &mut sink);
            assert_eq!(o.promotions, round as u64);
        }
        assert!(cache.contains(10));
    }

    #[test]
    fn orphans_dropped_on_second_strike() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        generate_master(100, 1, &path).unwrap();
        let store = open_master(&path).unwrap();
        let cache = FrequencyCache::new(0);
        let mut dp = DpState::new(100, 2);
        dp.store_mut().insert(srec(500, 0)).unwrap();
        let p = store.read_partition(500, 10).unwrap();
        let mut sink = collecting();
        assert_eq!(dp.dp_step(&p, &cache, &mut sink).orphans_dropped, 0);
        assert_eq!(dp.dp_step(&p, &cache, &mut sink).orphans_dropped, 1);
        assert!(dp.store().is_empty());
        assert_eq!(dp.orphans_dropped(), 1);
    }
}
