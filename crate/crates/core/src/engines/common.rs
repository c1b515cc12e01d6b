//! Types shared by all engines: output records and sinks, configuration,
//! per-iteration statistics and run reports.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use xxhash_rust::xxh3::xxh3_64;

use crate::error::{Error, Result};
use crate::join_structs::MemoryBudget;
use crate::master_store::{MasterRecord, MASTER_PAYLOAD_WIDTH};
use crate::stream_source::{StreamBuffer, StreamRecord, StreamSource, STREAM_PAYLOAD_WIDTH};

pub const JOINED_RECORD_WIDTH: usize = 4 + STREAM_PAYLOAD_WIDTH + MASTER_PAYLOAD_WIDTH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EngineKind {
    CacheJoin,
    PCacheJoin,
    OpCacheJoin,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::CacheJoin, EngineKind::PCacheJoin, EngineKind::OpCacheJoin];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::CacheJoin => "cachejoin",
            EngineKind::PCacheJoin => "pcachejoin",
            EngineKind::OpCacheJoin => "opcachejoin",
        }
    }

    pub fn disk_buffers(self) -> u64 {
        match self {
            EngineKind::OpCacheJoin => 2,
            _ => 1,
        }
    }

    pub fn uses_intermediate_buffer(self) -> bool {
        self != EngineKind::CacheJoin
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cachejoin" => Ok(EngineKind::CacheJoin),
            "pcachejoin" => Ok(EngineKind::PCacheJoin),
            "opcachejoin" => Ok(EngineKind::OpCacheJoin),
            _ => Err(Error::Config(format!("unknown engine {s:?}"))),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JoinedRecord {
    pub fkey: u32,
    pub stream_payload: [u8; STREAM_PAYLOAD_WIDTH],
    pub master_payload: [u8; MASTER_PAYLOAD_WIDTH],
}

impl JoinedRecord {
    pub fn new(stream: &StreamRecord, master_payload: &[u8; MASTER_PAYLOAD_WIDTH]) -> Self {
        Self {
            fkey: stream.fkey,
            stream_payload: stream.payload,
            master_payload: *master_payload,
        }
    }

    pub fn from_parts(stream: &StreamRecord, master: &MasterRecord) -> Self {
        Self::new(stream, &master.payload)
    }

    pub fn to_bytes(&self) -> [u8; JOINED_RECORD_WIDTH] {
        let mut out = [0u8; JOINED_RECORD_WIDTH];
        out[..4].copy_from_slice(&self.fkey.to_be_bytes());
        out[4..4 + STREAM_PAYLOAD_WIDTH].copy_from_slice(&self.stream_payload);
        out[4 + STREAM_PAYLOAD_WIDTH..].copy_from_slice(&self.master_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut stream_payload = [0u8; STREAM_PAYLOAD_WIDTH];
        stream_payload.copy_from_slice(&bytes[4..4 + STREAM_PAYLOAD_WIDTH]);
        let mut master_payload = [0u8; MASTER_PAYLOAD_WIDTH];
        master_payload.copy_from_slice(&bytes[4 + STREAM_PAYLOAD_WIDTH..JOINED_RECORD_WIDTH]);
        Self {
            fkey: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
            stream_payload,
            master_payload,
        }
    }
}

impl std::fmt::Debug for JoinedRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "JoinedRecord {{ fkey: {}, stream: {:02x?}, master[..4]: {:02x?} }}",
            self.fkey,
            &self.stream_payload[..8],
            &self.master_payload[..4]
        )
    }
}

/// Sorted copy of `records`, for order-free comparison.
pub fn multiset(mut records: Vec<JoinedRecord>) -> Vec<JoinedRecord> {
    records.sort_unstable();
    records
}

/// Where join output goes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SinkSpec {
    /// Count and checksum only.
    #[default]
    Count,
    /// Keep every record in memory (tests).
    Collect,
    /// Append serialized records to a file.
    File(PathBuf),
}

#[derive(Clone)]
pub(crate) enum SinkTarget {
    Count,
    Collect,
    File(Arc<Mutex<BufWriter<File>>>),
}

impl SinkTarget {
    pub(crate) fn open(spec: &SinkSpec) -> Result<Self> {
        Ok(match spec {
            SinkSpec::Count => SinkTarget::Count,
            SinkSpec::Collect => SinkTarget::Collect,
            SinkSpec::File(path) => SinkTarget::File(Arc::new(Mutex::new(BufWriter::new(File::create(path)?)))),
        })
    }
}

/// Per-worker output sink. Emitting builds the joined record and folds it into an
/// order-independent checksum, so parallel workers can be merged.
pub struct OutputSink {
    count: u64,
    checksum: u64,
    collected: Option<Vec<JoinedRecord>>,
    file: Option<Arc<Mutex<BufWriter<File>>>>,
    pending: Vec<u8>,
}

const FILE_FLUSH_BYTES: usize = 1 << 16;

impl OutputSink {
    pub(crate) fn new(target: &SinkTarget) -> Self {
        Self {
            count: 0,
            checksum: 0,
            collected: matches!(target, SinkTarget::Collect).then(Vec::new),
            file: match target {
                SinkTarget::File(f) => Some(f.clone()),
                _ => None,
            },
            pending: Vec::new(),
        }
    }

    pub fn counting() -> Self {
        Self::new(&SinkTarget::Count)
    }

    #[inline]
    pub fn emit(&mut self, stream: &StreamRecord, master_payload: &[u8; MASTER_PAYLOAD_WIDTH]) {
        let rec = JoinedRecord::new(stream, master_payload);
        let bytes = rec.to_bytes();
        self.checksum = self.checksum.wrapping_add(xxh3_64(&bytes));
        self.count += 1;
        if let Some(c) = &mut self.collected {
            c.push(rec);
        }
        if self.file.is_some() {
            self.pending.extend_from_slice(&bytes);
            if self.pending.len() >= FILE_FLUSH_BYTES {
                self.flush_file();
            }
        }
    }

    fn flush_file(&mut self) {
        if let Some(f) = &self.file {
            if !self.pending.is_empty() {
                // Write errors surface again at the final flush in `finish`.
                let _ = f.lock().unwrap().write_all(&self.pending);
                self.pending.clear();
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<SinkSummary> {
        self.flush_file();
        if let Some(f) = &self.file {
            f.lock().unwrap().flush()?;
        }
        Ok(SinkSummary {
            count: self.count,
            checksum: self.checksum,
            records: self.collected,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SinkSummary {
    pub count: u64,
    /// Wrapping sum of per-record hashes; independent of output order.
    pub checksum: u64,
    pub records: Option<Vec<JoinedRecord>>,
}

impl SinkSummary {
    pub fn merge(mut self, other: SinkSummary) -> SinkSummary {
        self.count += other.count;
        self.checksum = self.checksum.wrapping_add(other.checksum);
        self.records = match (self.records, other.records) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (a, b) => a.or(b),
        };
        self
    }

    pub fn multiset(&self) -> Option<Vec<JoinedRecord>> {
        self.records.clone().map(multiset)
    }
}

/// Checksum the sinks would produce for `records`.
pub fn checksum_of(records: &[JoinedRecord]) -> u64 {
    records
        .iter()
        .fold(0u64, |acc, r| acc.wrapping_add(xxh3_64(&r.to_bytes())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feed {
    /// The stream never runs dry; measures capacity.
    Saturation,
    /// Records arrive at a fixed rate; arrivals that find S_B full are dropped.
    RateLimited { records_per_sec: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StopCondition {
    /// Stop after this many stream records have been consumed.
    pub records: Option<u64>,
    /// Stop consuming after this much wall time.
    pub duration: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub budget: MemoryBudget,
    /// A disk record whose match count exceeds this is promoted into H_R.
    pub threshold: u64,
    /// Accumulate match counts across DP iterations instead of per probe.
    pub accumulate_frequency: bool,
    pub orphan_policy: bool,
    pub stop: StopCondition,
    pub warmup_iterations: usize,
    /// H_S occupancy that triggers a partition probe in the parallel engines.
    /// Defaults to H_S capacity.
    pub fill_trigger: Option<usize>,
    pub sink: SinkSpec,
    pub stream_buffer_bytes: u64,
    pub feed: Feed,
    pub shutdown_timeout: Duration,
    /// Verify |H_S| = |Q| at every iteration boundary (O(|H_S|) each).
    pub check_invariants: bool,
    /// Parallel engines: run SP at the lowest scheduling priority, so that with
    /// fewer cores than workers it uses the CPU time DP spends waiting on disk
    /// rather than competing with DP.
    pub sp_background: bool,
}

impl EngineConfig {
    pub fn new(budget: MemoryBudget) -> Self {
        Self {
            budget,
            threshold: 2,
            accumulate_frequency: false,
            orphan_policy: true,
            stop: StopCondition::default(),
            warmup_iterations: 100,
            fill_trigger: None,
            sink: SinkSpec::Count,
            stream_buffer_bytes: crate::stream_source::DEFAULT_STREAM_BUFFER_BYTES,
            feed: Feed::Saturation,
            shutdown_timeout: Duration::from_secs(60),
            check_invariants: false,
            sp_background: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Steady,
    /// Iterations after the stream was exhausted.
    Drain,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Steady => "steady",
            Phase::Drain => "drain",
        }
    }
}

/// One outer-loop iteration, delimited by the end of successive DP partition probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationStats {
    pub ordinal: u64,
    pub phase: Phase,
    /// Stream records matched through H_R (ω_N).
    pub omega_n: u64,
    /// Stream records matched through H_S (ω_S).
    pub omega_s: u64,
    pub sp_ns: u64,
    pub dp_ns: u64,
    pub load_ns: u64,
    /// DP time spent waiting for a loaded disk buffer.
    pub stall_ns: u64,
    /// c_loop.
    pub loop_ns: u64,
    pub promotions: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub engine: EngineKind,
    pub total_output: u64,
    pub stream_consumed: u64,
    pub orphans_dropped: u64,
    pub overflows: u64,
    pub iterations: Vec<IterationStats>,
    pub sink: SinkSummary,
    pub wall_ns: u64,
    pub invariant_violations: Vec<String>,
    /// Contents of H_R at the end of the run (collected when checking invariants).
    pub cache_snapshot: Option<Vec<MasterRecord>>,
    pub config: String,
}

impl RunReport {
    fn included(&self) -> Vec<&IterationStats> {
        let steady: Vec<_> = self.iterations.iter().filter(|i| i.phase == Phase::Steady).collect();
        if steady.is_empty() {
            self.iterations.iter().collect()
        } else {
            steady
        }
    }

    pub fn steady_iterations(&self) -> usize {
        self.iterations.iter().filter(|i| i.phase == Phase::Steady).count()
    }

    /// Service rate over the included (steady) iterations, records per second.
    pub fn mu(&self) -> f64 {
        let inc = self.included();
        let done: u64 = inc.iter().map(|i| i.omega_n + i.omega_s).sum();
        let ns: u64 = inc.iter().map(|i| i.loop_ns).sum();
        if ns == 0 {
            0.0
        } else {
            done as f64 / (ns as f64 * 1e-9)
        }
    }

    fn mean(&self, f: impl Fn(&IterationStats) -> u64) -> f64 {
        let inc = self.included();
        if inc.is_empty() {
            return 0.0;
        }
        inc.iter().map(|i| f(i) as f64).sum::<f64>() / inc.len() as f64
    }

    pub fn mean_omega_n(&self) -> f64 {
        self.mean(|i| i.omega_n)
    }

    pub fn mean_omega_s(&self) -> f64 {
        self.mean(|i| i.omega_s)
    }

    pub fn mean_c_loop_s(&self) -> f64 {
        self.mean(|i| i.loop_ns) * 1e-9
    }

    pub fn mean_load_ns(&self) -> f64 {
        self.mean(|i| i.load_ns)
    }

    pub fn mean_stall_ns(&self) -> f64 {
        self.mean(|i| i.stall_ns)
    }

    /// ω_N summed over the whole run divided by records consumed.
    pub fn cache_hit_ratio(&self) -> f64 {
        if self.stream_consumed == 0 {
            return 0.0;
        }
        let hits: u64 = self.iterations.iter().map(|i| i.omega_n).sum();
        hits as f64 / self.stream_consumed as f64
    }

    /// Line-oriented `key=value` text; iterations follow as `iter=` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "engine={}", self.engine);
        let _ = writeln!(s, "total_output={}", self.total_output);
        let _ = writeln!(s, "stream_consumed={}", self.stream_consumed);
        let _ = writeln!(s, "orphans_dropped={}", self.orphans_dropped);
        let _ = writeln!(s, "overflows={}", self.overflows);
        let _ = writeln!(s, "checksum={:016x}", self.sink.checksum);
        let _ = writeln!(s, "wall_ns={}", self.wall_ns);
        let _ = writeln!(s, "mu={:.3}", self.mu());
        let _ = writeln!(s, "mean_omega_n={:.3}", self.mean_omega_n());
        let _ = writeln!(s, "mean_omega_s={:.3}", self.mean_omega_s());
        let _ = writeln!(s, "mean_c_loop_s={:.9}", self.mean_c_loop_s());
        let _ = writeln!(s, "mean_load_ns={:.1}", self.mean_load_ns());
        let _ = writeln!(s, "mean_stall_ns={:.1}", self.mean_stall_ns());
        let _ = writeln!(s, "cache_hit_ratio={:.6}", self.cache_hit_ratio());
        let _ = writeln!(s, "steady_iterations={}", self.steady_iterations());
        let _ = writeln!(s, "invariant_violations={}", self.invariant_violations.len());
        let _ = writeln!(s, "config={}", self.config.replace('\n', " "));
        let _ = writeln!(s, "# iter=ordinal,phase,omega_n,omega_s,sp_ns,dp_ns,load_ns,stall_ns,loop_ns,promotions");
        for i in &self.iterations {
            let _ = writeln!(
                s,
                "iter={},{},{},{},{},{},{},{},{},{}",
                i.ordinal,
                i.phase.as_str(),
                i.omega_n,
                i.omega_s,
                i.sp_ns,
                i.dp_ns,
                i.load_ns,
                i.stall_ns,
                i.loop_ns,
                i.promotions
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Config(format!("run report line {}: {what}", line + 1));
        let mut report = RunReport {
            engine: EngineKind::CacheJoin,
            total_output: 0,
            stream_consumed: 0,
            orphans_dropped: 0,
            overflows: 0,
            iterations: Vec::new(),
            sink: SinkSummary::default(),
            wall_ns: 0,
            invariant_violations: Vec::new(),
            cache_snapshot: None,
            config: String::new(),
        };
        let mut saw_engine = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad(n, "expected key=value"))?;
            let int = |v: &str| v.parse::<u64>().map_err(|_| bad(n, "expected an integer"));
            match key {
                "engine" => {
                    report.engine = value.parse()?;
                    saw_engine = true;
                }
                "total_output" => report.total_output = int(value)?,
                "stream_consumed" => report.stream_consumed = int(value)?,
                "orphans_dropped" => report.orphans_dropped = int(value)?,
                "overflows" => report.overflows = int(value)?,
                "wall_ns" => report.wall_ns = int(value)?,
                "checksum" => {
                    report.sink.checksum = u64::from_str_radix(value, 16).map_err(|_| bad(n, "bad checksum"))?
                }
                "config" => report.config = value.to_string(),
                "iter" => {
                    let f: Vec<&str> = value.split(',').collect();
                    if f.len() != 10 {
                        return Err(bad(n, "iteration needs 10 fields"));
                    }
                    let phase = match f[1] {
                        "warmup" => Phase::Warmup,
                        "steady" => Phase::Steady,
                        "drain" => Phase::Drain,
                        _ => return Err(bad(n, "unknown phase")),
                    };
                    report.iterations.push(IterationStats {
                        ordinal: int(f[0])?,
                        phase,
                        omega_n: int(f[2])?,
                        omega_s: int(f[3])?,
                        sp_ns: int(f[4])?,
                        dp_ns: int(f[5])?,
                        load_ns: int(f[6])?,
                        stall_ns: int(f[7])?,
                        loop_ns: int(f[8])?,
                        promotions: int(f[9])?,
                    });
                }
                // Derived values are recomputed from the iteration log.
                _ => {}
            }
        }
        if !saw_engine {
            return Err(Error::Config("run report has no engine line".into()));
        }
        report.sink.count = report.total_output;
        Ok(report)
    }
}

/// Manages S_B for the SP phase: refills it from the source and enforces the stop
/// condition.
pub(crate) struct Feeder {
    source: Box<dyn StreamSource>,
    buffer: StreamBuffer,
    feed: Feed,
    records_left: Option<u64>,
    deadline: Option<Instant>,
    started: Instant,
    arrived: u64,
    exhausted: bool,
    pub consumed: u64,
}

impl Feeder {
    pub(crate) fn new(source: Box<dyn StreamSource>, config: &EngineConfig) -> Self {
        let mode = match config.feed {
            Feed::Saturation => crate::stream_source::FeedMode::Saturation,
            Feed::RateLimited { .. } => crate::stream_source::FeedMode::RateLimited,
        };
        let now = Instant::now();
        Self {
            source,
            buffer: StreamBuffer::new(config.stream_buffer_bytes, mode),
            feed: config.feed,
            records_left: config.stop.records,
            deadline: config.stop.duration.map(|d| now + d),
            started: now,
            arrived: 0,
            exhausted: false,
            consumed: 0,
        }
    }

    fn pull(&mut self, want: usize) -> usize {
        if self.exhausted {
            return 0;
        }
        if self.deadline.is_some_and(|d| Instant::now() >= d) {
            self.exhausted = true;
            return 0;
        }
        let want = match self.records_left {
            Some(left) => (want as u64).min(left) as usize,
            None => want,
        };
        if want == 0 {
            self.exhausted = true;
            return 0;
        }
        let mut staged = std::collections::VecDeque::with_capacity(want);
        let got = self.source.pull(&mut staged, want);
        if got == 0 {
            self.exhausted = true;
        }
        if let Some(left) = &mut self.records_left {
            *left -= got as u64;
        }
        for rec in staged {
            // Saturation pulls never exceed the free space; rate-limited arrivals may.
            let _ = self.buffer.feed(rec);
        }
        got
    }

    fn top_up(&mut self) {
        match self.feed {
            Feed::Saturation => {
                let free = self.buffer.capacity_records().saturating_sub(self.buffer.len());
                if free > 0 {
                    self.pull(free);
                }
            }
            Feed::RateLimited { records_per_sec } => {
                let due = (self.started.elapsed().as_secs_f64() * records_per_sec) as u64;
                let arrivals = due.saturating_sub(self.arrived);
                if arrivals > 0 {
                    let got = self.pull(arrivals.min(1 << 20) as usize);
                    self.arrived += got as u64;
                }
                if self.buffer.is_empty() && !self.exhausted {
                    std::thread::sleep(Duration::from_micros(100));
                }
            }
        }
    }

    /// Next record from S_B, topping it up first when empty.
    #[inline]
    pub(crate) fn pop(&mut self) -> Option<StreamRecord> {
        if self.buffer.is_empty() {
            self.top_up();
        }
        let rec = self.buffer.pop()?;
        self.consumed += 1;
        Some(rec)
    }

    /// Moves the current contents of S_B (topped up) into `out`.
    pub(crate) fn take_all(&mut self, out: &mut Vec<StreamRecord>) -> usize {
        self.top_up();
        let n = self.buffer.len();
        out.extend(self.buffer.take(n));
        self.consumed += n as u64;
        n
    }

    /// True once the source is exhausted and S_B is empty.
    pub(crate) fn done(&self) -> bool {
        self.exhausted && self.buffer.is_empty()
    }

    pub(crate) fn overflows(&self) -> u64 {
        self.buffer.overflows()
    }
}

pub(crate) fn nanos(d: Duration) -> u64 {
    d.as_nanos().min(u64::MAX as u128) as u64
}
