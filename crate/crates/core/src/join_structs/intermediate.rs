//! I_B: bounded blocking FIFO between the SP producer and the DP consumer.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::stream_source::StreamRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("intermediate buffer closed")]
pub struct Closed;

#[derive(Debug)]
struct State {
    queue: VecDeque<StreamRecord>,
    closed: bool,
    producers_waiting: usize,
    consumers_waiting: usize,
    /// Queue length a waiting consumer wants before it is woken.
    wanted: usize,
}

#[derive(Debug)]
pub struct IntermediateBuffer {
    capacity: usize,
    state: Mutex<State>,
    not_full: Condvar,
    not_empty: Condvar,
}

impl IntermediateBuffer {
    /// `capacity` is in records and must be at least one.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "I_B needs room for at least one record");
        Self {
            capacity,
            state: Mutex::new(State {
                queue: VecDeque::with_capacity(capacity.min(1 << 20)),
                closed: false,
                producers_waiting: 0,
                consumers_waiting: 0,
                wanted: 1,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    fn wait_not_full<'a>(&self, mut st: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        while st.queue.len() >= self.capacity && !st.closed {
            st.producers_waiting += 1;
            st = self.not_full.wait(st).unwrap();
            st.producers_waiting -= 1;
        }
        st
    }

    fn wait_not_empty<'a>(&self, mut st: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        while st.queue.is_empty() && !st.closed {
            st.consumers_waiting += 1;
            st.wanted = 1;
            st = self.not_empty.wait(st).unwrap();
            st.consumers_waiting -= 1;
        }
        st
    }

    fn pushed(&self, st: MutexGuard<'_, State>) {
        let wake = st.consumers_waiting > 0 && st.queue.len() >= st.wanted;
        drop(st);
        if wake {
            self.not_empty.notify_one();
        }
    }

    fn popped(&self, st: MutexGuard<'_, State>) {
        let wake = st.producers_waiting > 0;
        drop(st);
        if wake {
            self.not_full.notify_one();
        }
    }

    /// Blocks while full.
    pub fn push(&self, rec: StreamRecord) -> Result<(), Closed> {
        let mut st = self.wait_not_full(self.state.lock().unwrap());
        if st.closed {
            return Err(Closed);
        }
        st.queue.push_back(rec);
        self.pushed(st);
        Ok(())
    }

    /// Pushes without blocking. `Ok(false)` when full.
    pub fn try_push(&self, rec: StreamRecord) -> Result<bool, Closed> {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return Err(Closed);
        }
        if st.queue.len() >= self.capacity {
            return Ok(false);
        }
        st.queue.push_back(rec);
        self.pushed(st);
        Ok(true)
    }

    /// Pushes every record in order, blocking whenever the buffer is full.
    pub fn push_all(&self, recs: &[StreamRecord]) -> Result<(), Closed> {
        let mut rest = recs;
        while !rest.is_empty() {
            let mut st = self.wait_not_full(self.state.lock().unwrap());
            if st.closed {
                return Err(Closed);
            }
            let n = (self.capacity - st.queue.len()).min(rest.len());
            st.queue.extend(rest[..n].iter().copied());
            rest = &rest[n..];
            self.pushed(st);
        }
        Ok(())
    }

    /// Blocks while empty. After `close`, remaining records are still returned and
    /// `Closed` is reported once the buffer is drained.
    pub fn pop(&self) -> Result<StreamRecord, Closed> {
        let mut st = self.wait_not_empty(self.state.lock().unwrap());
        match st.queue.pop_front() {
            Some(rec) => {
                self.popped(st);
                Ok(rec)
            }
            None => Err(Closed),
        }
    }

    /// Moves up to `max` records into `out` without blocking.
    /// `Err(Closed)` means closed and drained.
    pub fn try_pop_batch(&self, max: usize, out: &mut Vec<StreamRecord>) -> Result<usize, Closed> {
        let mut st = self.state.lock().unwrap();
        let n = max.min(st.queue.len());
        if n == 0 {
            return if st.closed { Err(Closed) } else { Ok(0) };
        }
        out.extend(st.queue.drain(..n));
        self.popped(st);
        Ok(n)
    }

    /// Blocks until at least one record is available, then moves up to `max`.
    pub fn pop_batch(&self, max: usize, out: &mut Vec<StreamRecord>) -> Result<usize, Closed> {
        let mut st = self.wait_not_empty(self.state.lock().unwrap());
        let n = max.min(st.queue.len());
        if n == 0 {
            return Err(Closed);
        }
        out.extend(st.queue.drain(..n));
        self.popped(st);
        Ok(n)
    }

    /// Waits until `min` records are buffered (capped at capacity), the buffer is
    /// closed, or `timeout` passes, then moves up to `max`. Producers only wake
    /// the consumer once `min` is reached, so hand-offs happen in batches.
    /// Returns `Ok(0)` on timeout with nothing buffered.
    pub fn pop_batch_timeout(
        &self,
        min: usize,
        max: usize,
        out: &mut Vec<StreamRecord>,
        timeout: Duration,
    ) -> Result<usize, Closed> {
        let min = min.clamp(1, self.capacity);
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        while st.queue.len() < min && !st.closed {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            st.consumers_waiting += 1;
            st.wanted = min;
            st = self.not_empty.wait_timeout(st, left).unwrap().0;
            st.consumers_waiting -= 1;
        }
        let n = max.min(st.queue.len());
        if n == 0 {
            return if st.closed { Err(Closed) } else { Ok(0) };
        }
        out.extend(st.queue.drain(..n));
        self.popped(st);
        Ok(n)
    }

    /// Stops producers and wakes every waiter.
    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Duration;

    fn rec(k: u32) -> StreamRecord {
        StreamRecord {
            fkey: k,
            payload: [0; 16],
        }
    }

    #[test]
    fn fifo() {
        let b = IntermediateBuffer::new(4);
        b.push(rec(1)).unwrap();
        b.push(rec(2)).unwrap();
        assert_eq!(b.pop(), Ok(rec(1)));
        assert_eq!(b.pop(), Ok(rec(2)));
    }

    #[test]
    fn push_blocks_when_full_until_pop() {
        let b = Arc::new(IntermediateBuffer::new(2));
        b.push(rec(1)).unwrap();
        b.push(rec(2)).unwrap();
        let (tx, rx) = std::sync::mpsc::channel();
        let producer = {
            let b = b.clone();
            std::thread::spawn(move || {
                b.push(rec(3)).unwrap();
                tx.send(()).unwrap();
            })
        };
        assert!(rx.recv_timeout(Duration::from_millis(200)).is_err(), "third push did not block");
        assert_eq!(b.pop(), Ok(rec(1)));
        rx.recv_timeout(Duration::from_secs(5)).expect("push not released by pop");
        producer.join().unwrap();
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn close_wakes_consumer() {
        let b = Arc::new(IntermediateBuffer::new(2));
        let consumer = {
            let b = b.clone();
            std::thread::spawn(move || b.pop())
        };
        std::thread::sleep(Duration::from_millis(50));
        b.close();
        assert_eq!(consumer.join().unwrap(), Err(Closed));
        assert_eq!(b.push(rec(1)), Err(Closed));
    }

    #[test]
    fn close_drains_remaining() {
        let b = IntermediateBuffer::new(4);
        b.push_all(&[rec(1), rec(2)]).unwrap();
        b.close();
        let mut out = Vec::new();
        assert_eq!(b.pop_batch(10, &mut out), Ok(2));
        assert_eq!(b.pop_batch(10, &mut out), Err(Closed));
        assert_eq!(b.try_pop_batch(10, &mut out), Err(Closed));
    }
}
