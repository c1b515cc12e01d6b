//! Machinery shared by the parallel engines: the SP worker, the DP worker and the
//! orchestration that starts, watches and shuts them down.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use crate::engines::common::{
    nanos, EngineConfig, EngineKind, Feeder, IterationStats, OutputSink, Phase, RunReport, SinkSummary, SinkTarget,
};
use crate::engines::steps::DpState;
use crate::error::{Error, Result};
use crate::join_structs::{BufferStatus, Closed, DiskBuffers, FrequencyCache, IntermediateBuffer};
use crate::master_store::{MasterStore, Partition};
use crate::stream_source::{StreamRecord, StreamSource};

pub(crate) struct Shared {
    pub store: Arc<MasterStore>,
    pub cache: FrequencyCache,
    pub ib: IntermediateBuffer,
    /// SP hits since the last DP iteration boundary.
    pub sp_hits: AtomicU64,
    pub sp_busy_ns: AtomicU64,
    pub sp_done: AtomicBool,
    /// SP found no stream input on its last pull.
    pub sp_starved: AtomicBool,
    pub abort: AtomicBool,
    pub buffers: Option<DiskBuffers>,
    pub board: KeyBoard,
    /// Load time of the partition currently held by each disk buffer.
    pub buffer_load_ns: [AtomicU64; 2],
    pub loader_ns: AtomicU64,
}

impl Shared {
    fn abort(&self) {
        self.abort.store(true, Ordering::SeqCst);
        self.ib.close();
        if let Some(b) = &self.buffers {
            b.shutdown();
        }
        self.board.shutdown();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QueueEnd {
    Oldest,
    Newest,
}

/// Published front/rear keys of Q, read by the loaders.
#[derive(Debug, Default)]
pub(crate) struct KeyBoard {
    state: Mutex<(Option<(u32, u32)>, bool)>,
    changed: Condvar,
}

impl KeyBoard {
    pub fn publish(&self, oldest: Option<u32>, newest: Option<u32>) {
        let ends = oldest.zip(newest);
        let mut st = self.state.lock().unwrap();
        let wake = st.0.is_none() && ends.is_some();
        st.0 = ends;
        drop(st);
        if wake {
            self.changed.notify_all();
        }
    }

    /// Parks while Q is empty. `None` on shutdown.
    pub fn wait(&self, end: QueueEnd) -> Option<u32> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.1 {
                return None;
            }
            if let Some((oldest, newest)) = st.0 {
                return Some(match end {
                    QueueEnd::Oldest => oldest,
                    QueueEnd::Newest => newest,
                });
            }
            st = self.changed.wait(st).unwrap();
        }
    }

    pub fn shutdown(&self) {
        self.state.lock().unwrap().1 = true;
        self.changed.notify_all();
    }
}

enum WorkerResult {
    Sp(Result<(SinkSummary, u64, u64)>),
    Dp(Result<DpResult>),
    Loader(usize, Result<()>),
}

struct DpResult {
    sink: SinkSummary,
    iterations: Vec<IterationStats>,
    orphans: u64,
    violations: Vec<String>,
}

/// Drops the calling thread to the lowest scheduling priority.
fn lower_thread_priority() {
    // SAFETY: plain syscalls on the calling thread.
    unsafe {
        libc::setpriority(libc::PRIO_PROCESS as _, libc::gettid() as _, 19);
    }
}

/// Scheduler slice requested by the loader threads. A short slice lets a loader
/// preempt SP as soon as its read completes.
const LOADER_SLICE_NS: u64 = 100_000;

#[repr(C)]
struct SchedAttr {
    size: u32,
    policy: u32,
    flags: u64,
    nice: i32,
    priority: u32,
    runtime: u64,
    deadline: u64,
    period: u64,
}

/// Best effort: kernels without custom fair-class slices ignore or reject it.
fn request_slice(ns: u64) {
    let attr = SchedAttr {
        size: std::mem::size_of::<SchedAttr>() as u32,
        policy: libc::SCHED_OTHER as u32,
        flags: 0,
        nice: 0,
        priority: 0,
        runtime: ns,
        deadline: 0,
        period: 0,
    };
    // SAFETY: attr outlives the call and its size field matches the layout.
    unsafe {
        libc::syscall(libc::SYS_sched_setattr, 0, &attr as *const SchedAttr, 0);
    }
}

fn sp_worker(shared: &Shared, mut feeder: Feeder, mut sink: OutputSink, background: bool) -> Result<(SinkSummary, u64, u64)> {
    if background {
        lower_thread_priority();
    }
    let mut batch: Vec<StreamRecord> = Vec::new();
    'feed: while !shared.abort.load(Ordering::Relaxed) {
        batch.clear();
        if feeder.take_all(&mut batch) == 0 {
            if feeder.done() {
                break;
            }
            shared.sp_starved.store(true, Ordering::Relaxed);
            continue;
        }
        shared.sp_starved.store(false, Ordering::Relaxed);
        // Each miss goes to I_B as soon as it is found, so SP keeps pace with the
        // space DP frees instead of stalling on a whole batch.
        let mut rest = &batch[..];
        while !rest.is_empty() {
            let t = Instant::now();
            let mut hits = 0;
            let mut blocked = None;
            {
                let reader = shared.cache.reader();
                for (i, rec) in rest.iter().enumerate() {
                    match reader.lookup(rec.fkey) {
                        Some(master) => {
                            sink.emit(rec, &master.payload);
                            hits += 1;
                        }
                        None => match shared.ib.try_push(*rec) {
                            Ok(true) => {}
                            Ok(false) => {
                                blocked = Some(i);
                                break;
                            }
                            Err(Closed) => break 'feed,
                        },
                    }
                }
            }
            shared.sp_hits.fetch_add(hits, Ordering::SeqCst);
            shared.sp_busy_ns.fetch_add(nanos(t.elapsed()), Ordering::Relaxed);
            match blocked {
                // The cache lock is released before blocking: DP may need it to promote.
                Some(i) => {
                    if shared.ib.push(rest[i]).is_err() {
                        break 'feed;
                    }
                    rest = &rest[i + 1..];
                }
                None => rest = &[],
            }
        }
    }
    shared.sp_done.store(true, Ordering::SeqCst);
    shared.ib.close();
    Ok((sink.finish()?, feeder.consumed, feeder.overflows()))
}

/// How long DP waits on I_B before re-checking whether SP is starved.
const SP_POLL: std::time::Duration = std::time::Duration::from_millis(1);

/// How the DP worker obtains partitions.
enum Supply {
    /// Read synchronously at the oldest Q key (P-CACHEJOIN).
    Sync(Partition),
    /// Claim whichever disk buffer the loaders filled (OP-CACHEJOIN).
    Double { prefer: usize },
}

fn dp_worker(shared: &Shared, config: &EngineConfig, mut supply: Supply, mut sink: OutputSink) -> Result<DpResult> {
    let d_b = config.budget.d_b as usize;
    let mut dp = DpState::from_config(config);
    let capacity = dp.store().capacity();
    let trigger = config.fill_trigger.unwrap_or(capacity).clamp(1, capacity);
    let mut incoming: Vec<StreamRecord> = Vec::new();
    let mut iterations = Vec::new();
    let mut violations = Vec::new();
    let mut drained = false;
    let mut boundary = Instant::now();

    let publish = |dp: &DpState| shared.board.publish(dp.store().oldest_key(), dp.store().newest_key());

    loop {
        if shared.abort.load(Ordering::Relaxed) {
            break;
        }
        let draining = shared.sp_done.load(Ordering::SeqCst);
        // Move I_B into H_S until the fill trigger. An empty I_B only cuts the fill
        // short when SP itself is waiting for stream input; otherwise SP is merely
        // behind and DP waits for it.
        while dp.store().len() < trigger && !drained {
            incoming.clear();
            let free = dp.store().free_slots();
            let got = match shared.ib.try_pop_batch(free, &mut incoming) {
                Ok(0) if dp.store().is_empty() => shared.ib.pop_batch(free, &mut incoming),
                Ok(0) if shared.sp_starved.load(Ordering::Relaxed) => break,
                Ok(0) => shared.ib.pop_batch_timeout(trigger - dp.store().len(), free, &mut incoming, SP_POLL),
                other => other,
            };
            match got {
                Ok(0) => continue,
                Ok(_) => {
                    for rec in incoming.drain(..) {
                        dp.store_mut().insert(rec).expect("popped at most the free slots");
                    }
                }
                Err(Closed) => drained = true,
            }
        }
        if dp.store().is_empty() {
            if drained || shared.abort.load(Ordering::Relaxed) {
                break;
            }
            continue;
        }
        let t_dp = Instant::now();
        let (outcome, load_ns, stall_ns) = match &mut supply {
            Supply::Sync(partition) => {
                let key = dp.store().oldest_key().expect("non-empty");
                shared.store.read_partition_into(key, d_b, partition)?;
                let load_ns = nanos(t_dp.elapsed());
                (dp.dp_step(partition, &shared.cache, &mut sink), load_ns, 0)
            }
            Supply::Double { prefer } => {
                let buffers = shared.buffers.as_ref().expect("double-buffered engine");
                publish(&dp);
                let Some(i) = buffers.claim_full(*prefer) else {
                    break;
                };
                let stall_ns = nanos(t_dp.elapsed());
                let partition = buffers.take_partition(i)?;
                let outcome = dp.dp_step(&partition, &shared.cache, &mut sink);
                buffers.put_partition(i, partition);
                buffers.transition(i, BufferStatus::Busy, BufferStatus::Empty)?;
                *prefer = 1 - i;
                publish(&dp);
                (outcome, shared.buffer_load_ns[i].load(Ordering::Relaxed), stall_ns)
            }
        };
        let dp_ns = nanos(t_dp.elapsed());
        if config.check_invariants {
            if let Err(e) = dp.store().check_invariants() {
                violations.push(format!("iteration {}: {e}", iterations.len()));
            }
        }
        let now = Instant::now();
        let ordinal = iterations.len() as u64;
        iterations.push(IterationStats {
            ordinal,
            phase: if draining {
                Phase::Drain
            } else if (ordinal as usize) < config.warmup_iterations {
                Phase::Warmup
            } else {
                Phase::Steady
            },
            omega_n: shared.sp_hits.swap(0, Ordering::SeqCst),
            omega_s: outcome.omega_s,
            sp_ns: shared.sp_busy_ns.swap(0, Ordering::Relaxed),
            dp_ns: dp_ns - stall_ns,
            load_ns,
            stall_ns,
            loop_ns: nanos(now - boundary),
            promotions: outcome.promotions,
        });
        boundary = now;
    }

    shared.board.shutdown();
    if let Some(b) = &shared.buffers {
        b.shutdown();
    }
    // SP hits after the final probe.
    let residual = shared.sp_hits.swap(0, Ordering::SeqCst);
    if residual > 0 {
        iterations.push(IterationStats {
            ordinal: iterations.len() as u64,
            phase: Phase::Drain,
            omega_n: residual,
            omega_s: 0,
            sp_ns: shared.sp_busy_ns.swap(0, Ordering::Relaxed),
            dp_ns: 0,
            load_ns: 0,
            stall_ns: 0,
            loop_ns: nanos(boundary.elapsed()),
            promotions: 0,
        });
    }
    Ok(DpResult {
        sink: sink.finish()?,
        iterations,
        orphans: dp.orphans_dropped(),
        violations,
    })
}

/// Fills disk buffer `buf` whenever it is EMPTY, indexed by one end of Q.
fn loader_worker(shared: &Shared, buf: usize, end: QueueEnd, d_b: usize) -> Result<()> {
    let buffers = shared.buffers.as_ref().expect("double-buffered engine");
    request_slice(LOADER_SLICE_NS);
    loop {
        if !buffers.wait_for(buf, BufferStatus::Empty) {
            return Ok(());
        }
        let Some(key) = shared.board.wait(end) else {
            return Ok(());
        };
        if buffers.transition(buf, BufferStatus::Empty, BufferStatus::Loading)? != crate::join_structs::TransitionOutcome::Done {
            continue;
        }
        let mut partition = buffers.take_partition(buf)?;
        let t = Instant::now();
        let read = shared.store.read_partition_into(key, d_b, &mut partition);
        let ns = nanos(t.elapsed());
        buffers.put_partition(buf, partition);
        read?;
        shared.buffer_load_ns[buf].store(ns, Ordering::Relaxed);
        shared.loader_ns.fetch_add(ns, Ordering::Relaxed);
        buffers.transition(buf, BufferStatus::Loading, BufferStatus::Full)?;
    }
}

fn spawn<F>(name: &str, tx: &mpsc::Sender<WorkerResult>, f: F) -> Result<JoinHandle<()>>
where
    F: FnOnce() -> WorkerResult + Send + 'static,
{
    let tx = tx.clone();
    let label = name.to_string();
    Ok(std::thread::Builder::new().name(name.into()).spawn(move || {
        let msg = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let what = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_default();
            let err = Error::Worker(format!("{label} panicked: {what}"));
            match label.as_str() {
                "sp" => WorkerResult::Sp(Err(err)),
                "dp" => WorkerResult::Dp(Err(err)),
                l => WorkerResult::Loader(l.trim_start_matches("loader").parse().unwrap_or(0), Err(err)),
            }
        });
        let _ = tx.send(msg);
    })?)
}

pub(crate) fn run_parallel(
    kind: EngineKind,
    store: Arc<MasterStore>,
    source: Box<dyn StreamSource>,
    config: &EngineConfig,
) -> Result<RunReport> {
    if store.record_count() == 0 {
        return Err(Error::EmptyRelation);
    }
    if config.budget.i_b == 0 {
        return Err(Error::Config(format!("{kind} needs an intermediate buffer of at least one record")));
    }
    let double = kind == EngineKind::OpCacheJoin;
    if double && config.budget.n_disk_buffers != 2 {
        return Err(Error::Config(format!(
            "{kind} needs a budget with two disk buffers, got {}",
            config.budget.n_disk_buffers
        )));
    }
    let started = Instant::now();
    let target = SinkTarget::open(&config.sink)?;
    let shared = Arc::new(Shared {
        store,
        cache: FrequencyCache::new(config.budget.h_r as usize),
        ib: IntermediateBuffer::new(config.budget.i_b as usize),
        sp_hits: AtomicU64::new(0),
        sp_busy_ns: AtomicU64::new(0),
        sp_done: AtomicBool::new(false),
        sp_starved: AtomicBool::new(false),
        abort: AtomicBool::new(false),
        buffers: double.then(|| DiskBuffers::new(2)),
        board: KeyBoard::default(),
        buffer_load_ns: [AtomicU64::new(0), AtomicU64::new(0)],
        loader_ns: AtomicU64::new(0),
    });

    let (tx, rx) = mpsc::channel();
    let mut handles = Vec::new();
    let feeder = Feeder::new(source, config);
    {
        let (shared, sink, background) = (shared.clone(), OutputSink::new(&target), config.sp_background);
        handles.push(spawn("sp", &tx, move || {
            WorkerResult::Sp(sp_worker(&shared, feeder, sink, background))
        })?);
    }
    {
        let (shared, sink, cfg) = (shared.clone(), OutputSink::new(&target), config.clone());
        let supply = if double {
            Supply::Double { prefer: 0 }
        } else {
            Supply::Sync(Partition::default())
        };
        handles.push(spawn("dp", &tx, move || WorkerResult::Dp(dp_worker(&shared, &cfg, supply, sink)))?);
    }
    if double {
        for (buf, end) in [(0, QueueEnd::Oldest), (1, QueueEnd::Newest)] {
            let shared = shared.clone();
            let d_b = config.budget.d_b as usize;
            handles.push(spawn(&format!("loader{buf}"), &tx, move || {
                WorkerResult::Loader(buf, loader_worker(&shared, buf, end, d_b))
            })?);
        }
    }
    drop(tx);

    let mut sp = None;
    let mut dp = None;
    let mut loaders = [!double, !double];
    let mut first_error: Option<Error> = None;
    let mut deadline: Option<Instant> = None;
    while sp.is_none() || dp.is_none() || !loaders.iter().all(|&l| l) {
        let msg = match deadline {
            None => rx.recv().map_err(|_| mpsc::RecvTimeoutError::Disconnected),
            Some(d) => rx.recv_timeout(d.saturating_duration_since(Instant::now())),
        };
        let msg = match msg {
            Ok(m) => m,
            Err(_) => {
                shared.abort();
                let mut stuck = Vec::new();
                if sp.is_none() {
                    stuck.push("SP worker".to_string());
                }
                if dp.is_none() {
                    stuck.push(format!("DP worker (I_B holds {} records)", shared.ib.len()));
                }
                for (i, done) in loaders.iter().enumerate() {
                    if !done {
                        stuck.push(format!("loader {i}"));
                    }
                }
                return Err(first_error.unwrap_or(Error::ShutdownTimeout { stuck: stuck.join(", ") }));
            }
        };
        let failed = match msg {
            WorkerResult::Sp(r) => {
                deadline.get_or_insert_with(|| Instant::now() + config.shutdown_timeout);
                let e = r.as_ref().err().map(|e| e.to_string());
                sp = Some(r);
                e
            }
            WorkerResult::Dp(r) => {
                let e = r.as_ref().err().map(|e| e.to_string());
                dp = Some(r);
                e
            }
            WorkerResult::Loader(i, r) => {
                loaders[i] = true;
                r.err().map(|e| {
                    let s = e.to_string();
                    first_error.get_or_insert(e);
                    s
                })
            }
        };
        if failed.is_some() {
            shared.abort();
            deadline.get_or_insert_with(|| Instant::now() + config.shutdown_timeout);
        }
    }
    for h in handles {
        let _ = h.join();
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let (sp_sink, consumed, overflows) = sp.expect("reported")?;
    let dp = dp.expect("reported")?;
    let sink = sp_sink.merge(dp.sink);
    Ok(RunReport {
        engine: kind,
        total_output: sink.count,
        stream_consumed: consumed,
        orphans_dropped: dp.orphans,
        overflows,
        iterations: dp.iterations,
        sink,
        wall_ns: nanos(started.elapsed()),
        invariant_violations: dp.violations,
        cache_snapshot: config.check_invariants.then(|| shared.cache.records()),
        config: format!("{config:?}"),
    })
}

