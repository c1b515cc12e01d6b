//! H_R: cache of frequently joined master records.
//!
//! Readers (SP) take a shared lock and bump per-entry atomic counters; promotion
//! (DP) takes the exclusive lock. Eviction removes the entry with the lowest
//! counter, oldest insertion first on ties. The min-heap holds snapshots of the
//! counters; since counters only grow, a popped snapshot that is still current is
//! a true minimum, and stale ones are re-pushed with their current value.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{RwLock, RwLockReadGuard};

use ahash::AHashMap;

use crate::master_store::MasterRecord;

#[derive(Debug)]
struct CacheEntry {
    record: MasterRecord,
    freq: AtomicU64,
    tick: u64,
}

#[derive(Debug, Default)]
struct Inner {
    map: AHashMap<u32, CacheEntry>,
    heap: BinaryHeap<Reverse<(u64, u64, u32)>>,
    tick: u64,
}

#[derive(Debug)]
pub struct FrequencyCache {
    capacity: usize,
    inner: RwLock<Inner>,
}

/// Shared view used by the SP phase for a batch of lookups.
pub struct CacheReader<'a> {
    guard: RwLockReadGuard<'a, Inner>,
}

impl CacheReader<'_> {
    /// On a hit, bumps the counter and returns the cached record.
    #[inline]
    pub fn lookup(&self, key: u32) -> Option<&MasterRecord> {
        let entry = self.guard.map.get(&key)?;
        entry.freq.fetch_add(1, Ordering::Relaxed);
        Some(&entry.record)
    }
}

impl FrequencyCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            inner: RwLock::new(Inner {
                map: AHashMap::with_capacity(capacity),
                ..Default::default()
            }),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reader(&self) -> CacheReader<'_> {
        CacheReader {
            guard: self.inner.read().unwrap(),
        }
    }

    pub fn lookup(&self, key: u32) -> Option<MasterRecord> {
        self.reader().lookup(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: u32) -> bool {
        self.inner.read().unwrap().map.contains_key(&key)
    }

    pub fn frequency(&self, key: u32) -> Option<u64> {
        let inner = self.inner.read().unwrap();
        inner.map.get(&key).map(|e| e.freq.load(Ordering::Relaxed))
    }

    /// All cached records, for coherence checks.
    pub fn records(&self) -> Vec<MasterRecord> {
        let inner = self.inner.read().unwrap();
        inner.map.values().map(|e| e.record.clone()).collect()
    }

    /// Caches `record` with initial counter `observed_freq`, evicting the
    /// least-frequent entry when full. Returns the evicted key.
    ///
    /// A record that is already cached has its counter raised instead.
    pub fn promote(&self, record: &MasterRecord, observed_freq: u64) -> Option<u32> {
        if self.capacity == 0 {
            return None;
        }
        let mut guard = self.inner.write().unwrap();
        let inner = &mut *guard;
        if let Some(e) = inner.map.get(&record.key) {
            e.freq.fetch_add(observed_freq, Ordering::Relaxed);
            return None;
        }
        let evicted = if inner.map.len() >= self.capacity {
            Self::evict_one(inner)
        } else {
            None
        };
        inner.tick += 1;
        let tick = inner.tick;
        inner.map.insert(
            record.key,
            CacheEntry {
                record: record.clone(),
                freq: AtomicU64::new(observed_freq),
                tick,
            },
        );
        inner.heap.push(Reverse((observed_freq, tick, record.key)));
        evicted
    }

    fn evict_one(inner: &mut Inner) -> Option<u32> {
        while let Some(Reverse((snapshot, tick, key))) = inner.heap.pop() {
            let Some(entry) = inner.map.get(&key) else {
                continue;
            };
            if entry.tick != tick {
                continue;
            }
            let current = entry.freq.load(Ordering::Relaxed);
            if current != snapshot {
                inner.heap.push(Reverse((current, tick, key)));
                continue;
            }
            inner.map.remove(&key);
            return Some(key);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master_store::MASTER_PAYLOAD_WIDTH;

    fn rec(key: u32) -> MasterRecord {
        MasterRecord {
            key,
            payload: [key as u8; MASTER_PAYLOAD_WIDTH],
        }
    }

    #[test]
    fn lookup_hits_and_misses() {
        let c = FrequencyCache::new(4);
        assert!(c.lookup(1).is_none());
        assert_eq!(c.promote(&rec(1), 3), None);
        assert_eq!(c.lookup(1), Some(rec(1)));
        c.lookup(1);
        assert_eq!(c.frequency(1), Some(5));
    }

    #[test]
    fn evicts_lowest_counter() {
        let c = FrequencyCache::new(3);
        c.promote(&rec(1), 5);
        c.promote(&rec(2), 1);
        c.promote(&rec(3), 4);
        assert_eq!(c.promote(&rec(4), 3), Some(2));
        assert!(!c.contains(2));
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn ties_evict_oldest() {
        let c = FrequencyCache::new(3);
        c.promote(&rec(1), 1);
        c.promote(&rec(2), 9);
        c.promote(&rec(3), 1);
        assert_eq!(c.promote(&rec(4), 3), Some(1));
        assert_eq!(c.promote(&rec(5), 3), Some(3));
    }

    #[test]
    fn hits_protect_from_eviction() {
        let c = FrequencyCache::new(2);
        c.promote(&rec(1), 3);
        c.promote(&rec(2), 3);
        for _ in 0..5 {
            c.lookup(1);
        }
        assert_eq!(c.promote(&rec(3), 3), Some(2));
        for _ in 0..10 {
            c.lookup(3);
        }
        assert_eq!(c.promote(&rec(4), 3), Some(1));
    }

    #[test]
    fn zero_capacity_never_caches() {
        let c = FrequencyCache::new(0);
        assert_eq!(c.promote(&rec(1), 100), None);
        assert!(c.is_empty());
    }

    #[test]
    fn repromotion_bumps_counter() {
        let c = FrequencyCache::new(2);
        c.promote(&rec(1), 3);
        assert_eq!(c.promote(&rec(1), 4), None);
        assert_eq!(c.frequency(1), Some(7));
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn concurrent_lookups_see_whole_records() {
        let c = std::sync::Arc::new(FrequencyCache::new(64));
        let reader = {
            let c = c.clone();
            std::thread::spawn(move || {
                for i in 0..200_000u32 {
                    if let Some(r) = c.lookup(i % 256) {
                        assert!(r.payload.iter().all(|&b| b == r.key as u8));
                    }
                }
            })
        };
        for k in 0..256 {
            c.promote(&rec(k), 3);
        }
        reader.join().unwrap();
        assert_eq!(c.len(), 64);
    }
}
