use std::sync::Arc;
use std::time::Duration;

use cachejoin_core::engines::{
    multiset, oracle_join, run_engine, EngineConfig, EngineKind, Phase, SinkSpec, StopCondition,
};
use cachejoin_core::join_structs::{plan_budget, BudgetRequest};
use cachejoin_core::master_store::{generate_master, open_master, MasterStore, MasterWriter, MasterRecord};
use cachejoin_core::stream_source::{ReplaySource, StreamRecord, ZipfSpec, ZipfStream};
use cachejoin_core::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    store: Arc<MasterStore>,
}

fn fixture(count: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("master");
    generate_master(count, 11, &path).unwrap();
    Fixture {
        store: Arc::new(open_master(&path).unwrap()),
        _dir: dir,
    }
}

fn stream(store: &MasterStore, n: usize, exponent: f64, orphan_rate: f64, seed: u64) -> Vec<StreamRecord> {
    let mut spec = ZipfSpec::new(exponent, seed);
    spec.orphan_rate = orphan_rate;
    ZipfStream::new(spec, store.key_space().unwrap()).unwrap().next_batch(n)
}

fn config(kind: EngineKind, total: u64, d_b: u64, h_r: u64, ib: u64) -> EngineConfig {
    let budget = plan_budget(&BudgetRequest::new(total, d_b, kind.disk_buffers(), h_r, ib)).unwrap();
    let mut c = EngineConfig::new(budget);
    c.sink = SinkSpec::Collect;
    c.check_invariants = true;
    c.warmup_iterations = 5;
    c
}

fn run(kind: EngineKind, store: &Arc<MasterStore>, s: &[StreamRecord], c: &EngineConfig) -> Vec<cachejoin_core::engines::JoinedRecord> {
    let report = run_engine(kind, store.clone(), Box::new(ReplaySource::new(s.to_vec())), c).unwrap();
    assert!(report.invariant_violations.is_empty(), "{:?}", report.invariant_violations);
    assert_eq!(report.stream_consumed, s.len() as u64);
    let omega: u64 = report.iterations.iter().map(|i| i.omega_n + i.omega_s).sum();
    assert_eq!(omega, report.total_output);
    report.sink.multiset().unwrap()
}

#[test]
fn all_engines_match_oracle() {
    let f = fixture(5_000);
    let s = stream(&f.store, 40_000, 1.0, 0.0, 3);
    let want = multiset(oracle_join(&f.store, &s).unwrap());
    assert_eq!(want.len(), s.len());
    for kind in EngineKind::ALL {
        let c = config(kind, 1 << 20, 200, 300, 64 << 10);
        assert_eq!(run(kind, &f.store, &s, &c), want, "{kind}");
    }
}

#[test]
fn orphans_are_dropped_and_not_joined() {
    let f = fixture(2_000);
    let s = stream(&f.store, 20_000, 0.8, 0.05, 4);
    let want = multiset(oracle_join(&f.store, &s).unwrap());
    assert!(want.len() < s.len());
    for kind in EngineKind::ALL {
        let c = config(kind, 1 << 20, 100, 100, 16 << 10);
        let report = run_engine(kind, f.store.clone(), Box::new(ReplaySource::new(s.clone())), &c).unwrap();
        assert_eq!(report.sink.multiset().unwrap(), want, "{kind}");
        assert_eq!(report.orphans_dropped, (s.len() - want.len()) as u64, "{kind}");
    }
}

#[test]
fn tiny_intermediate_buffer_stays_live() {
    let f = fixture(1_000);
    let s = stream(&f.store, 5_000, 1.0, 0.0, 5);
    let want = multiset(oracle_join(&f.store, &s).unwrap());
    for kind in [EngineKind::PCacheJoin, EngineKind::OpCacheJoin] {
        let mut c = config(kind, 512 << 10, 50, 50, 20);
        assert_eq!(c.budget.i_b, 1);
        c.shutdown_timeout = Duration::from_secs(30);
        assert_eq!(run(kind, &f.store, &s, &c), want, "{kind}");
    }
}

#[test]
fn empty_stream_produces_nothing() {
    let f = fixture(100);
    for kind in EngineKind::ALL {
        let c = config(kind, 1 << 20, 10, 10, 1 << 10);
        assert!(run(kind, &f.store, &[], &c).is_empty());
    }
}

#[test]
fn empty_relation_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty");
    MasterWriter::create(&path).unwrap().finish().unwrap();
    let store = Arc::new(open_master(&path).unwrap());
    for kind in EngineKind::ALL {
        let c = config(kind, 1 << 20, 10, 10, 1 << 10);
        let err = run_engine(kind, store.clone(), Box::new(ReplaySource::new(Vec::new())), &c).unwrap_err();
        assert!(matches!(err, Error::EmptyRelation), "{kind}: {err}");
    }
}

#[test]
fn sparse_keys_and_wraparound() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sparse");
    let mut w = MasterWriter::create(&path).unwrap();
    for k in (0..3_000u32).map(|i| 7 + i * 13) {
        w.push(&MasterRecord { key: k, payload: [k as u8; 116] }).unwrap();
    }
    w.finish().unwrap();
    let store = Arc::new(open_master(&path).unwrap());
    let s = stream(&store, 15_000, 0.9, 0.02, 6);
    let want = multiset(oracle_join(&store, &s).unwrap());
    for kind in EngineKind::ALL {
        let c = config(kind, 1 << 20, 128, 64, 8 << 10);
        assert_eq!(run(kind, &store, &s, &c), want, "{kind}");
    }
}

#[test]
fn parallel_runs_are_repeatable() {
    let f = fixture(3_000);
    let s = stream(&f.store, 20_000, 1.0, 0.0, 7);
    for kind in [EngineKind::PCacheJoin, EngineKind::OpCacheJoin] {
        let c = config(kind, 1 << 20, 100, 200, 32 << 10);
        let first = run(kind, &f.store, &s, &c);
        for _ in 0..4 {
            assert_eq!(run(kind, &f.store, &s, &c), first, "{kind}");
        }
    }
}

#[test]
fn record_limit_and_phases() {
    let f = fixture(2_000);
    for kind in EngineKind::ALL {
        let mut c = config(kind, 1 << 20, 100, 100, 16 << 10);
        c.stop = StopCondition {
            records: Some(7_000),
            duration: None,
        };
        c.sink = SinkSpec::Count;
        let src = ZipfStream::new(ZipfSpec::new(1.0, 8), f.store.key_space().unwrap()).unwrap();
        let report = run_engine(kind, f.store.clone(), Box::new(src), &c).unwrap();
        assert_eq!(report.stream_consumed, 7_000, "{kind}");
        assert_eq!(report.total_output, 7_000, "{kind}");
        let phases: Vec<Phase> = report.iterations.iter().map(|i| i.phase).collect();
        assert!(phases.iter().take(5).all(|p| *p != Phase::Steady), "{kind}");
        assert_eq!(*phases.last().unwrap(), Phase::Drain, "{kind}");
    }
}

#[test]
fn op_requires_two_disk_buffers() {
    let f = fixture(100);
    let c = config(EngineKind::PCacheJoin, 1 << 20, 10, 10, 1 << 10);
    let err = run_engine(EngineKind::OpCacheJoin, f.store.clone(), Box::new(ReplaySource::new(Vec::new())), &c).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
