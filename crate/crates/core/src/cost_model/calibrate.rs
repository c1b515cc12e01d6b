use std::hint::black_box;
use std::time::Instant;

use ahash::AHashSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CostConstants;
use crate::engines::OutputSink;
use crate::error::{Error, Result};
use crate::join_structs::{IntermediateBuffer, StreamStore};
use crate::master_store::{KeySpace, MasterStore, Partition};
use crate::stream_source::{StreamRecord, ZipfSpec, ZipfStream};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    /// Partition sizes to time loads for.
    pub d_b_values: Vec<u64>,
    /// Timed trials per primitive; the median is kept. At least 30.
    pub trials: usize,
    /// Operations per trial for the per-record primitives.
    pub batch: usize,
    /// Occupancy of H_S while timing its operations.
    pub hs_records: usize,
    /// Partition size used when timing H_S probes and deletes.
    pub probe_d_b: u64,
    /// Workload used to populate H_S: Zipf exponent, and how many of the hottest
    /// keys to leave out because H_R would absorb them.
    pub exponent: f64,
    pub h_r: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            d_b_values: vec![850],
            trials: 31,
            batch: 2_000,
            hs_records: 100_000,
            probe_d_b: 850,
            exponent: 1.0,
            h_r: 8_738,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub constants: CostConstants,
    pub clock_resolution_ns: f64,
    pub warnings: Vec<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn clock_resolution_ns() -> f64 {
    let mut best = u128::MAX;
    for _ in 0..1_000 {
        let t = Instant::now();
        let mut d = t.elapsed().as_nanos();
        while d == 0 {
            d = t.elapsed().as_nanos();
        }
        best = best.min(d);
    }
    best as f64
}

struct Bench {
    trials: usize,
    resolution: f64,
    max_batch: usize,
    warnings: Vec<String>,
}

impl Bench {
    /// Median per-operation time over the trials. `setup(trial, batch)` runs
    /// untimed before each trial; `op(trial, batch)` is timed and returns how many
    /// operations it performed. When a trial is too short for the clock the batch
    /// grows until it is not.
    fn per_op<S, T>(&mut self, name: &str, mut batch: usize, mut setup: S, mut op: T) -> f64
    where
        S: FnMut(usize, usize),
        T: FnMut(usize, usize) -> usize,
    {
        loop {
            let mut per_op = Vec::with_capacity(self.trials);
            let mut trial_ns = Vec::with_capacity(self.trials);
            for trial in 0..self.trials {
                setup(trial, batch);
                let t = Instant::now();
                let ops = op(trial, batch);
                let ns = t.elapsed().as_nanos() as f64;
                trial_ns.push(ns);
                if ops > 0 {
                    per_op.push(ns / ops as f64);
                }
            }
            let m = median(trial_ns);
            if (m >= 5.0 * self.resolution || batch * 2 > self.max_batch) && !per_op.is_empty() {
                return median(per_op).max(f64::MIN_POSITIVE);
            }
            self.warnings.push(format!(
                "{name}: {batch}-op trial took {m} ns, under 5x the {} ns clock resolution; retrying with a larger batch",
                self.resolution
            ));
            batch *= 2;
        }
    }
}

fn record(rng: &mut ChaCha8Rng, keys: &KeySpace) -> StreamRecord {
    StreamRecord {
        fkey: keys.key_at(rng.gen_range(0..keys.len())),
        payload: rng.gen(),
    }
}

/// `n` items of `pool` for one trial, wrapping around; consecutive trials get
/// disjoint windows until the pool is exhausted.
fn window<T: Copy>(pool: &[T], trial: usize, n: usize) -> impl Iterator<Item = T> + '_ {
    (0..n).map(move |i| pool[(trial * n + i) % pool.len()])
}

/// Times each primitive of the cost model on this host against `store`.
/// Access patterns follow the engines: random keys, H_S at `hs_records`
/// occupancy, and no key reused between trials, so timings include cache misses.
/// Must not run concurrently with an engine.
pub fn calibrate(store: &MasterStore, opts: &CalibrationOptions) -> Result<Calibration> {
    if store.record_count() == 0 {
        return Err(Error::EmptyRelation);
    }
    if opts.trials < 30 {
        return Err(Error::Config(format!("calibration needs at least 30 trials, got {}", opts.trials)));
    }
    if opts.d_b_values.is_empty() || opts.d_b_values.contains(&0) {
        return Err(Error::Config("calibration needs positive d_B values".into()));
    }
    let keys = store.key_space()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch = opts.batch.max(1);
    let trials = opts.trials;
    let mut bench = Bench {
        trials,
        resolution: clock_resolution_ns(),
        max_batch: batch * 16,
        warnings: Vec::new(),
    };

    let mut c_io = Vec::new();
    let mut partition = Partition::default();
    for &d_b in &opts.d_b_values {
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            let key = keys.key_at(rng.gen_range(0..keys.len()));
            let t = Instant::now();
            store.read_partition_into(key, d_b as usize, &mut partition)?;
            samples.push(t.elapsed().as_nanos() as f64);
        }
        c_io.push((d_b, median(samples).max(f64::MIN_POSITIVE)));
    }
    c_io.sort_by_key(|&(d, _)| d);

    let pool_len = trials * batch * 4;
    let pool: Vec<StreamRecord> = (0..pool_len).map(|_| record(&mut rng, &keys)).collect();

    // H_S shaped like the engines': the workload's keys minus the hottest ones.
    let mut zipf = ZipfStream::new(ZipfSpec::new(opts.exponent, opts.seed ^ 0x2a), keys.clone())?;
    let hot: AHashSet<u32> = (1..=opts.h_r.min(keys.len())).map(|r| zipf.key_for_rank(r)).collect();
    if hot.len() == keys.len() {
        return Err(Error::Config("calibration H_R covers every key; nothing would reach H_S".into()));
    }
    let mut next = move || loop {
        let r = zipf.next_record();
        if !hot.contains(&r.fkey) {
            return r;
        }
    };

    let hs_records = opts.hs_records.max(trials);
    let mut hs = StreamStore::new(hs_records);
    while !hs.is_full() {
        hs.insert(next()).expect("not full");
    }

    // DP-shaped iterations after a warmup that brings H_S to a steady state.
    // c_h: probe every key of a partition read at a random key.
    // c_e: probe-and-delete a partition read at the oldest Q key, as DP does, net
    // of its probes.
    // c_a: top H_S back up with fresh workload records.
    let warmup = trials * 2;
    let d_b = opts.probe_d_b.max(1) as usize;
    let mut probe_part = Partition::default();
    let mut dp_part = Partition::default();
    let mut evicted = Vec::new();
    let mut staged = Vec::new();
    let (mut h_samples, mut e_trials, mut a_samples) = (Vec::new(), Vec::new(), Vec::new());
    let mut iteration = 0;
    while e_trials.len() < trials && iteration < warmup + trials * 20 {
        iteration += 1;
        let timed = iteration > warmup;
        let start = keys.key_at(rng.gen_range(0..keys.len()));
        store.read_partition_into(start, d_b, &mut probe_part)?;
        let oldest = hs.oldest_key().expect("H_S is non-empty");
        store.read_partition_into(oldest, d_b, &mut dp_part)?;

        let t = Instant::now();
        for i in 0..probe_part.len() {
            black_box(hs.count(probe_part.key(i)));
        }
        let probe_ns = t.elapsed().as_nanos() as f64;
        if timed && h_samples.len() < trials {
            h_samples.push(probe_ns / probe_part.len() as f64);
        }

        evicted.clear();
        let t = Instant::now();
        for i in 0..dp_part.len() {
            hs.match_and_evict(dp_part.key(i), &mut evicted);
        }
        let total_ns = t.elapsed().as_nanos() as f64;
        if evicted.is_empty() {
            // Absent key; drop it the way the orphan policy would.
            let _ = hs.strike_orphans(oldest);
            let _ = hs.strike_orphans(oldest);
        } else if timed {
            e_trials.push((total_ns, dp_part.len(), evicted.len()));
        }

        staged.clear();
        staged.extend((0..hs.free_slots()).map(|_| next()));
        let t = Instant::now();
        for r in &staged {
            let _ = hs.insert(*r);
        }
        if timed && !staged.is_empty() {
            a_samples.push(t.elapsed().as_nanos() as f64 / staged.len() as f64);
        }
    }
    if e_trials.is_empty() {
        return Err(Error::Config("calibration found no H_S matches; check the workload settings".into()));
    }
    let c_h = median(h_samples).max(f64::MIN_POSITIVE);
    let c_a = median(a_samples).max(f64::MIN_POSITIVE);
    let c_e = median(
        e_trials
            .into_iter()
            .map(|(ns, probes, n)| ((ns - probes as f64 * c_h) / n as f64).max(0.0))
            .collect(),
    )
    .max(f64::MIN_POSITIVE);
    drop(hs);

    let thresholds: Vec<u64> = (0..pool_len).map(|_| rng.gen_range(0..6)).collect();
    let c_f = bench.per_op("c_f", batch, |_, _| {}, |trial, n| {
        let t = black_box(2u64);
        for f in window(&thresholds, trial, n) {
            black_box(black_box(f) > t);
        }
        n
    });

    let master_payload = [0xa5u8; 116];
    let mut sink = OutputSink::counting();
    let c_o = bench.per_op("c_o", batch, |_, _| {}, |trial, n| {
        for r in window(&pool, trial, n) {
            sink.emit(&r, &master_payload);
        }
        n
    });
    black_box(sink.count());

    let ib = IntermediateBuffer::new(batch * 16);
    let staged = std::cell::RefCell::new(Vec::with_capacity(batch * 16));
    let c_ab = bench.per_op(
        "c_ab",
        batch,
        |trial, n| {
            let mut s = staged.borrow_mut();
            s.clear();
            let _ = ib.try_pop_batch(usize::MAX, &mut s);
            s.clear();
            s.extend(window(&pool, trial, n));
        },
        |_, n| {
            let _ = ib.push_all(&staged.borrow()[..n]);
            n
        },
    );
    let c_s = bench.per_op(
        "c_s",
        batch,
        |trial, n| {
            let mut s = staged.borrow_mut();
            s.clear();
            let _ = ib.try_pop_batch(usize::MAX, &mut s);
            s.clear();
            s.extend(window(&pool, trial, n));
            let _ = ib.push_all(&s);
            s.clear();
        },
        |_, n| {
            let mut s = staged.borrow_mut();
            let _ = ib.try_pop_batch(n, &mut s);
            black_box(&*s);
            n
        },
    );

    Ok(Calibration {
        constants: CostConstants {
            c_io,
            c_h,
            c_o,
            c_e,
            c_s,
            c_a,
            c_f,
            c_ab,
        },
        clock_resolution_ns: bench.resolution,
        warnings: bench.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master_store::{generate_master, open_master};

    #[test]
    fn constants_positive_and_io_dominates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        generate_master(20_000, 1, &path).unwrap();
        let store = open_master(&path).unwrap();
        let opts = CalibrationOptions {
            d_b_values: vec![100, 850],
            hs_records: 10_000,
            batch: 500,
            ..Default::default()
        };
        let cal = calibrate(&store, &opts).unwrap();
        let k = &cal.constants;
        for v in [k.c_h, k.c_o, k.c_e, k.c_s, k.c_a, k.c_f, k.c_ab] {
            assert!(v > 0.0 && v.is_finite(), "{k:?}");
        }
        assert_eq!(k.c_io.len(), 2);
        assert!(k.c_io(850) > k.c_h, "{k:?}");
    }

    #[test]
    fn rejects_too_few_trials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        generate_master(10, 1, &path).unwrap();
        let store = open_master(&path).unwrap();
        let opts = CalibrationOptions {
            trials: 5,
            ..Default::default()
        };
        assert!(matches!(calibrate(&store, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
