//! Disk buffers with the EMPTY -> LOADING -> FULL -> BUSY -> EMPTY status machine.
//!
//! Buffers of one engine share a lock. Each buffer has its own condition variable
//! for its loader, and a separate one signals FULL buffers to the DP phase.

use std::sync::{Condvar, Mutex, MutexGuard};
use crate::error::{Error, Result};
use crate::master_store::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BufferStatus {
    Empty,
    Loading,
    Full,
    Busy,
}

impl BufferStatus {
    pub fn is_legal_edge(from: BufferStatus, to: BufferStatus) -> bool {
        use BufferStatus::*;
        matches!(
            (from, to),
            (Empty, Loading) | (Loading, Full) | (Full, Busy) | (Busy, Empty)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionOutcome {
    Done,
    /// The buffer was not in the expected state; retry later.
    Contended { actual: BufferStatus },
}

#[derive(Debug)]
struct Slot {
    status: BufferStatus,
    partition: Option<Partition>,
}

#[derive(Debug)]
struct Slots {
    slots: Vec<Slot>,
    shutdown: bool,
}

#[derive(Debug)]
pub struct DiskBuffers {
    state: Mutex<Slots>,
    slot_changed: Vec<Condvar>,
    filled: Condvar,
}

impl DiskBuffers {
    pub fn new(n: usize) -> Self {
        Self {
            state: Mutex::new(Slots {
                slots: (0..n)
                    .map(|_| Slot {
                        status: BufferStatus::Empty,
                        partition: Some(Partition::default()),
                    })
                    .collect(),
                shutdown: false,
            }),
            slot_changed: (0..n).map(|_| Condvar::new()).collect(),
            filled: Condvar::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> MutexGuard<'_, Slots> {
        self.state.lock().unwrap()
    }

    pub fn status(&self, buf: usize) -> BufferStatus {
        self.lock().slots[buf].status
    }

    /// Atomic compare-and-transition. Waiters are woken on success.
    pub fn transition(&self, buf: usize, from: BufferStatus, to: BufferStatus) -> Result<TransitionOutcome> {
        if !BufferStatus::is_legal_edge(from, to) {
            return Err(Error::IllegalTransition { from, to });
        }
        let mut st = self.lock();
        let slot = &mut st.slots[buf];
        if slot.status != from {
            return Ok(TransitionOutcome::Contended { actual: slot.status });
        }
        slot.status = to;
        drop(st);
        self.slot_changed[buf].notify_all();
        if to == BufferStatus::Full {
            self.filled.notify_all();
        }
        Ok(TransitionOutcome::Done)
    }

    /// Takes the partition storage out of a buffer the caller owns (LOADING or BUSY).
    pub fn take_partition(&self, buf: usize) -> Result<Partition> {
        let mut st = self.lock();
        let slot = &mut st.slots[buf];
        match slot.status {
            BufferStatus::Loading | BufferStatus::Busy => Ok(slot.partition.take().unwrap_or_default()),
            other => Err(Error::Domain(format!("buffer {buf} is {other:?}; its partition is not owned"))),
        }
    }

    pub fn put_partition(&self, buf: usize, partition: Partition) {
        self.lock().slots[buf].partition = Some(partition);
    }

    /// Blocks until `buf` reaches `status` or shutdown. Returns false on shutdown.
    pub fn wait_for(&self, buf: usize, status: BufferStatus) -> bool {
        let mut st = self.lock();
        loop {
            if st.shutdown {
                return false;
            }
            if st.slots[buf].status == status {
                return true;
            }
            st = self.slot_changed[buf].wait(st).unwrap();
        }
    }

    /// Claims the first FULL buffer (FULL -> BUSY), blocking until one exists.
    /// `prefer` is tried first. Returns `None` on shutdown.
    pub fn claim_full(&self, prefer: usize) -> Option<usize> {
        let mut st = self.lock();
        loop {
            if st.shutdown {
                return None;
            }
            let n = st.slots.len();
            if let Some(i) = (0..n).map(|j| (prefer + j) % n).find(|&i| st.slots[i].status == BufferStatus::Full) {
                st.slots[i].status = BufferStatus::Busy;
                drop(st);
                self.slot_changed[i].notify_all();
                return Some(i);
            }
            st = self.filled.wait(st).unwrap();
        }
    }

    pub fn shutdown(&self) {
        self.lock().shutdown = true;
        for c in &self.slot_changed {
            c.notify_all();
        }
        self.filled.notify_all();
    }

    pub fn is_shutdown(&self) -> bool {
        self.lock().shutdown
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use BufferStatus::*;

    #[test]
    fn legal_cycle() {
        let b = DiskBuffers::new(1);
        for (from, to) in [(Empty, Loading), (Loading, Full), (Full, Busy), (Busy, Empty)] {
            assert_eq!(b.transition(0, from, to).unwrap(), TransitionOutcome::Done);
        }
        assert_eq!(b.status(0), Empty);
    }

    #[test]
    fn illegal_edge_is_error() {
        let b = DiskBuffers::new(1);
        assert!(matches!(b.transition(0, Empty, Busy), Err(Error::IllegalTransition { .. })));
        assert!(matches!(b.transition(0, Full, Empty), Err(Error::IllegalTransition { .. })));
    }

    #[test]
    fn wrong_state_is_contention() {
        let b = DiskBuffers::new(1);
        assert_eq!(
            b.transition(0, Full, Busy).unwrap(),
            TransitionOutcome::Contended { actual: Empty }
        );
    }

    #[test]
    fn partition_ownership_follows_status() {
        let b = DiskBuffers::new(1);
        assert!(b.take_partition(0).is_err());
        b.transition(0, Empty, Loading).unwrap();
        let p = b.take_partition(0).unwrap();
        b.put_partition(0, p);
    }

    #[test]
    fn concurrent_claim_has_one_winner() {
        for _ in 0..200 {
            let b = Arc::new(DiskBuffers::new(1));
            b.transition(0, Empty, Loading).unwrap();
            b.transition(0, Loading, Full).unwrap();
            let wins = Arc::new(AtomicUsize::new(0));
            let handles: Vec<_> = (0..2)
                .map(|_| {
                    let (b, wins) = (b.clone(), wins.clone());
                    std::thread::spawn(move || {
                        if b.transition(0, Full, Busy).unwrap() == TransitionOutcome::Done {
                            wins.fetch_add(1, Ordering::SeqCst);
                        }
                    })
                })
                .collect();
            for h in handles {
                h.join().unwrap();
            }
            assert_eq!(wins.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn shutdown_releases_waiters() {
        let b = Arc::new(DiskBuffers::new(2));
        let waiter = {
            let b = b.clone();
            std::thread::spawn(move || b.claim_full(0))
        };
        std::thread::sleep(Duration::from_millis(20));
        b.shutdown();
        assert_eq!(waiter.join().unwrap(), None);
        assert!(!b.wait_for(0, Full));
    }
}
