use cachejoin_core::master_store::{IoMode, MasterRecord, MasterStore, MasterWriter, MASTER_PAYLOAD_WIDTH};
use proptest::prelude::*;

fn payload(key: u32) -> [u8; MASTER_PAYLOAD_WIDTH] {
    let mut p = [0u8; MASTER_PAYLOAD_WIDTH];
    for (i, b) in p.iter_mut().enumerate() {
        *b = (key as usize).wrapping_mul(31).wrapping_add(i) as u8;
    }
    p
}

/// Sorted distinct keys from positive gaps.
fn keys_from_gaps(gaps: &[u32]) -> Vec<u32> {
    let mut k = 0u32;
    gaps.iter()
        .map(|g| {
            k += g;
            k
        })
        .collect()
}

/// The partition by brute force over the key list.
fn oracle(keys: &[u32], start_key: u32, d_b: usize) -> Vec<u32> {
    let first = keys.iter().position(|&k| k >= start_key).unwrap_or(0);
    (0..d_b.min(keys.len())).map(|i| keys[(first + i) % keys.len()]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_window_matches_oracle(
        gaps in prop::collection::vec(1u32..50, 1..1500),
        probes in prop::collection::vec((any::<u32>(), 1usize..2000), 1..20),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let keys = keys_from_gaps(&gaps);
        let mut w = MasterWriter::create(&path).unwrap();
        for &key in &keys {
            w.push(&MasterRecord { key, payload: payload(key) }).unwrap();
        }
        w.finish().unwrap();
        let store = MasterStore::open(&path, IoMode::Buffered).unwrap();
        let max = *keys.last().unwrap();
        for (raw, d_b) in probes {
            let start = raw % (max + 10);
            let p = store.read_partition(start, d_b).unwrap();
            let want = oracle(&keys, start, d_b);
            prop_assert_eq!(p.keys().collect::<Vec<_>>(), want.clone());
            for i in 0..p.len() {
                prop_assert_eq!(p.payload(i), &payload(want[i]));
            }
        }
    }
}
