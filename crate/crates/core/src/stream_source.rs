//! Skewed stream generation, replay files and the stream buffer S_B.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::master_store::KeySpace;

pub const STREAM_PAYLOAD_WIDTH: usize = 16;
/// Serialized size of one stream record (v_S).
pub const STREAM_RECORD_WIDTH: usize = 4 + STREAM_PAYLOAD_WIDTH;
/// 0.05 MB, the default S_B size.
pub const DEFAULT_STREAM_BUFFER_BYTES: u64 = 52_428;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamRecord {
    pub fkey: u32,
    pub payload: [u8; STREAM_PAYLOAD_WIDTH],
}

impl StreamRecord {
    pub fn to_bytes(&self) -> [u8; STREAM_RECORD_WIDTH] {
        let mut out = [0u8; STREAM_RECORD_WIDTH];
        out[..4].copy_from_slice(&self.fkey.to_be_bytes());
        out[4..].copy_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut payload = [0u8; STREAM_PAYLOAD_WIDTH];
        payload.copy_from_slice(&bytes[4..STREAM_RECORD_WIDTH]);
        Self {
            fkey: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
            payload,
        }
    }
}

/// `rank^-exponent / H(n, exponent)`.
pub fn zipf_probability(rank: u64, exponent: f64, n_keys: u64) -> Result<f64> {
    if n_keys == 0 || rank == 0 || rank > n_keys {
        return Err(Error::Domain(format!("rank {rank} outside 1..={n_keys}")));
    }
    if !(exponent >= 0.0) {
        return Err(Error::Domain(format!("zipf exponent {exponent} must be >= 0")));
    }
    let norm: f64 = (1..=n_keys).map(|k| (k as f64).powf(-exponent)).sum();
    Ok((rank as f64).powf(-exponent) / norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankToKey {
    /// Rank r draws the r-th smallest master key.
    Identity,
    /// Ranks are assigned to keys by a seeded shuffle.
    Permuted { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZipfSpec {
    pub exponent: f64,
    pub seed: u64,
    pub rank_to_key: RankToKey,
    /// Fraction of records whose key is absent from the master relation.
    pub orphan_rate: f64,
}

impl ZipfSpec {
    pub fn new(exponent: f64, seed: u64) -> Self {
        Self {
            exponent,
            seed,
            rank_to_key: RankToKey::Identity,
            orphan_rate: 0.0,
        }
    }
}

/// Anything the SP phase can pull stream records from.
pub trait StreamSource: Send {
    /// Appends up to `max` records to `out`; returns how many were appended.
    /// Zero means the source is exhausted.
    fn pull(&mut self, out: &mut VecDeque<StreamRecord>, max: usize) -> usize;
}

/// Zipf-distributed stream over a master key space, sampled by inverse CDF.
pub struct ZipfStream {
    spec: ZipfSpec,
    rng: ChaCha8Rng,
    cdf: Vec<f64>,
    rank_keys: Option<Vec<u32>>,
    keys: KeySpace,
    orphan_base: u32,
    seq: u64,
}

impl ZipfStream {
    pub fn new(spec: ZipfSpec, keys: KeySpace) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::EmptyRelation);
        }
        if !(spec.exponent >= 0.0) || !spec.exponent.is_finite() {
            return Err(Error::Domain(format!("zipf exponent {} must be >= 0", spec.exponent)));
        }
        if !(0.0..=1.0).contains(&spec.orphan_rate) {
            return Err(Error::Domain(format!("orphan rate {} outside [0, 1]", spec.orphan_rate)));
        }
        let n = keys.len();
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for rank in 1..=n {
            acc += (rank as f64).powf(-spec.exponent);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        let rank_keys = match spec.rank_to_key {
            RankToKey::Identity => None,
            RankToKey::Permuted { seed } => {
                let mut order: Vec<u32> = (0..n).map(|i| keys.key_at(i)).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Some(order)
            }
        };
        let orphan_base = keys.max_key().unwrap_or(0).saturating_add(1);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            cdf,
            rank_keys,
            keys,
            orphan_base,
            seq: 0,
        })
    }

    pub fn spec(&self) -> &ZipfSpec {
        &self.spec
    }

    /// 1-based rank drawn from the distribution.
    pub fn sample_rank(&mut self) -> usize {
        let u: f64 = self.rng.gen();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1) + 1
    }

    pub fn key_for_rank(&self, rank: usize) -> u32 {
        match &self.rank_keys {
            Some(order) => order[rank - 1],
            None => self.keys.key_at(rank - 1),
        }
    }

    fn orphan_key(&mut self) -> u32 {
        if self.orphan_base == u32::MAX || self.orphan_base == 0 {
            // No room above the key space: look for a gap below it.
            return (0..u32::MAX).find(|k| !self.keys.contains(*k)).unwrap_or(0);
        }
        let span = (u32::MAX - self.orphan_base).min(1 << 16);
        self.orphan_base + self.rng.gen_range(0..span.max(1))
    }

    pub fn next_record(&mut self) -> StreamRecord {
        let fkey = if self.spec.orphan_rate > 0.0 && self.rng.gen_bool(self.spec.orphan_rate) {
            self.orphan_key()
        } else {
            let rank = self.sample_rank();
            self.key_for_rank(rank)
        };
        let mut payload = [0u8; STREAM_PAYLOAD_WIDTH];
        payload[..8].copy_from_slice(&self.seq.to_be_bytes());
        self.rng.fill_bytes(&mut payload[8..]);
        self.seq += 1;
        StreamRecord { fkey, payload }
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<StreamRecord> {
        (0..n).map(|_| self.next_record()).collect()
    }
}

impl StreamSource for ZipfStream {
    fn pull(&mut self, out: &mut VecDeque<StreamRecord>, max: usize) -> usize {
        for _ in 0..max {
            let rec = self.next_record();
            out.push_back(rec);
        }
        max
    }
}

/// Replays an in-memory record sequence once.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    records: std::sync::Arc<[StreamRecord]>,
    pos: usize,
}

impl ReplaySource {
    pub fn new(records: impl Into<std::sync::Arc<[StreamRecord]>>) -> Self {
        Self {
            records: records.into(),
            pos: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.records.len() - self.pos
    }
}

impl StreamSource for ReplaySource {
    fn pull(&mut self, out: &mut VecDeque<StreamRecord>, max: usize) -> usize {
        let n = max.min(self.remaining());
        out.extend(self.records[self.pos..self.pos + n].iter().copied());
        self.pos += n;
        n
    }
}

/// Caps another source at a fixed number of records.
pub struct Limited<S> {
    inner: S,
    remaining: u64,
}

impl<S: StreamSource> Limited<S> {
    pub fn new(inner: S, limit: u64) -> Self {
        Self {
            inner,
            remaining: limit,
        }
    }
}

impl<S: StreamSource> StreamSource for Limited<S> {
    fn pull(&mut self, out: &mut VecDeque<StreamRecord>, max: usize) -> usize {
        let want = (max as u64).min(self.remaining) as usize;
        if want == 0 {
            return 0;
        }
        let n = self.inner.pull(out, want);
        self.remaining -= n as u64;
        n
    }
}

impl StreamSource for Box<dyn StreamSource> {
    fn pull(&mut self, out: &mut VecDeque<StreamRecord>, max: usize) -> usize {
        (**self).pull(out, max)
    }
}

pub fn write_replay(path: impl AsRef<Path>, records: &[StreamRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        out.write_all(&rec.to_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_replay(path: impl AsRef<Path>) -> Result<Vec<StreamRecord>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % STREAM_RECORD_WIDTH != 0 {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a multiple of {STREAM_RECORD_WIDTH}", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(STREAM_RECORD_WIDTH).map(StreamRecord::from_bytes).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedMode {
    /// The buffer is topped up from its source whenever it is read; takes never come up short
    /// until the source is exhausted.
    Saturation,
    /// Records arrive externally; feeds beyond capacity are rejected and counted.
    RateLimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("stream buffer full")]
pub struct Overflow;

/// The stream buffer S_B.
#[derive(Debug)]
pub struct StreamBuffer {
    capacity_bytes: u64,
    mode: FeedMode,
    pending: VecDeque<StreamRecord>,
    overflows: u64,
}

impl StreamBuffer {
    pub fn new(capacity_bytes: u64, mode: FeedMode) -> Self {
        let cap = (capacity_bytes / STREAM_RECORD_WIDTH as u64) as usize;
        Self {
            capacity_bytes,
            mode,
            pending: VecDeque::with_capacity(cap),
            overflows: 0,
        }
    }

    pub fn capacity_records(&self) -> usize {
        (self.capacity_bytes / STREAM_RECORD_WIDTH as u64) as usize
    }

    pub fn mode(&self) -> FeedMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn overflows(&self) -> u64 {
        self.overflows
    }

    pub fn feed(&mut self, rec: StreamRecord) -> Result<(), Overflow> {
        if self.pending.len() >= self.capacity_records() {
            self.overflows += 1;
            return Err(Overflow);
        }
        self.pending.push_back(rec);
        Ok(())
    }

    /// Tops the buffer up to capacity from `source`; returns records added.
    pub fn refill(&mut self, source: &mut dyn StreamSource) -> usize {
        let free = self.capacity_records().saturating_sub(self.pending.len());
        if free == 0 {
            return 0;
        }
        source.pull(&mut self.pending, free)
    }

    pub fn take(&mut self, k: usize) -> Vec<StreamRecord> {
        let n = k.min(self.pending.len());
        self.pending.drain(..n).collect()
    }

    pub fn pop(&mut self) -> Option<StreamRecord> {
        self.pending.pop_front()
    }

    /// Saturation-mode take: refills from `source` as often as needed to return `k`
    /// records, unless the source runs dry.
    pub fn take_saturated(&mut self, source: &mut dyn StreamSource, k: usize) -> Vec<StreamRecord> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pending.is_empty() && self.refill(source) == 0 {
                break;
            }
            let n = (k - out.len()).min(self.pending.len());
            out.extend(self.pending.drain(..n));
        }
        out
    }
}
