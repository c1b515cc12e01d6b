//! Reference join used to check the engines.

use ahash::AHashMap;

use crate::engines::common::JoinedRecord;
use crate::error::Result;
use crate::master_store::MasterStore;
use crate::stream_source::StreamRecord;

/// Joins `stream` against the whole relation with a plain hash map, in stream order.
pub fn oracle_join(store: &MasterStore, stream: &[StreamRecord]) -> Result<Vec<JoinedRecord>> {
    let mut map = AHashMap::with_capacity(store.record_count() as usize);
    for rec in store.scan_records()? {
        map.insert(rec.key, rec.payload);
    }
    Ok(stream
        .iter()
        .filter_map(|s| map.get(&s.fkey).map(|p| JoinedRecord::new(s, p)))
        .collect())
}
