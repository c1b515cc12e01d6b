//! H_S (multi-map of buffered stream records) coupled with its key queue Q.
//!
//! Q is a doubly linked list stored in a slab so that entries can be unlinked in
//! O(1) when their record is matched. New keys enter at the front; the rear is
//! the oldest surviving entry.

use ahash::AHashMap;

use crate::stream_source::StreamRecord;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueHandle(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("stream store is full")]
pub struct StoreFull;

#[derive(Debug, Clone, Copy)]
struct Node {
    key: u32,
    prev: u32,
    next: u32,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    record: StreamRecord,
    handle: u32,
    orphan_strike: bool,
}

#[derive(Debug)]
pub struct StreamStore {
    map: AHashMap<u32, Vec<Entry>>,
    nodes: Vec<Node>,
    free: Vec<u32>,
    /// Newest entry.
    front: u32,
    /// Oldest entry.
    rear: u32,
    len: usize,
    capacity: usize,
    spare_lists: Vec<Vec<Entry>>,
}

impl StreamStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            map: AHashMap::with_capacity(capacity.min(1 << 22)),
            nodes: Vec::with_capacity(capacity.min(1 << 22)),
            free: Vec::new(),
            front: NIL,
            rear: NIL,
            len: 0,
            capacity,
            spare_lists: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.capacity
    }

    pub fn free_slots(&self) -> usize {
        self.capacity.saturating_sub(self.len)
    }

    /// Number of distinct keys in H_S.
    pub fn distinct_keys(&self) -> usize {
        self.map.len()
    }

    pub fn insert(&mut self, record: StreamRecord) -> Result<QueueHandle, StoreFull> {
        if self.is_full() {
            return Err(StoreFull);
        }
        let node = Node {
            key: record.fkey,
            prev: NIL,
            next: self.front,
        };
        let id = match self.free.pop() {
            Some(id) => {
                self.nodes[id as usize] = node;
                id
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        };
        if self.front != NIL {
            self.nodes[self.front as usize].prev = id;
        } else {
            self.rear = id;
        }
        self.front = id;
        let spare = &mut self.spare_lists;
        self.map
            .entry(record.fkey)
            .or_insert_with(|| spare.pop().unwrap_or_default())
            .push(Entry {
                record,
                handle: id,
                orphan_strike: false,
            });
        self.len += 1;
        Ok(QueueHandle(id))
    }

    fn unlink(&mut self, id: u32) {
        let Node { prev, next, .. } = self.nodes[id as usize];
        if prev != NIL {
            self.nodes[prev as usize].next = next;
        } else {
            self.front = next;
        }
        if next != NIL {
            self.nodes[next as usize].prev = prev;
        } else {
            self.rear = prev;
        }
        self.free.push(id);
        self.len -= 1;
    }

    fn recycle(&mut self, mut list: Vec<Entry>) {
        if self.spare_lists.len() < 4096 && list.capacity() <= 64 {
            list.clear();
            self.spare_lists.push(list);
        }
    }

    /// Number of buffered records with `key`, without touching them.
    #[inline]
    pub fn count(&self, key: u32) -> usize {
        self.map.get(&key).map_or(0, Vec::len)
    }

    /// Removes every record with `fkey == key` from H_S and Q, appending them to
    /// `out` in insertion order. Returns how many were removed.
    pub fn match_and_evict(&mut self, key: u32, out: &mut Vec<StreamRecord>) -> usize {
        let Some(list) = self.map.remove(&key) else {
            return 0;
        };
        let n = list.len();
        for e in &list {
            self.unlink(e.handle);
            out.push(e.record);
        }
        self.recycle(list);
        n
    }

    /// Like [`match_and_evict`](Self::match_and_evict) but hands each record to `f`.
    #[inline]
    pub fn match_and_evict_with(&mut self, key: u32, mut f: impl FnMut(&StreamRecord)) -> usize {
        let Some(list) = self.map.remove(&key) else {
            return 0;
        };
        let n = list.len();
        for e in &list {
            self.unlink(e.handle);
            f(&e.record);
        }
        self.recycle(list);
        n
    }

    pub fn oldest_key(&self) -> Option<u32> {
        (self.rear != NIL).then(|| self.nodes[self.rear as usize].key)
    }

    pub fn newest_key(&self) -> Option<u32> {
        (self.front != NIL).then(|| self.nodes[self.front as usize].key)
    }

    /// Applies one orphan strike to the records with `key`: records already struck
    /// are dropped, the rest are marked. Returns the number dropped.
    pub fn strike_orphans(&mut self, key: u32) -> usize {
        let Some(mut list) = self.map.remove(&key) else {
            return 0;
        };
        let mut dropped = Vec::new();
        list.retain_mut(|e| {
            if e.orphan_strike {
                dropped.push(e.handle);
                false
            } else {
                e.orphan_strike = true;
                true
            }
        });
        for &id in &dropped {
            self.unlink(id);
        }
        if list.is_empty() {
            self.recycle(list);
        } else {
            self.map.insert(key, list);
        }
        dropped.len()
    }

    /// Keys in queue order, oldest first.
    pub fn queue_keys(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.len);
        let mut cursor = self.rear;
        while cursor != NIL {
            let node = self.nodes[cursor as usize];
            out.push(node.key);
            cursor = node.prev;
        }
        out
    }

    /// Walks Q and checks that it is consistent with H_S. Returns the queue length.
    pub fn check_invariants(&self) -> Result<usize, String> {
        let q = self.queue_keys();
        let map_len: usize = self.map.values().map(Vec::len).sum();
        if q.len() != map_len || q.len() != self.len {
            return Err(format!("|Q| = {} but |H_S| = {map_len} (len {})", q.len(), self.len));
        }
        if self.len > self.capacity {
            return Err(format!("{} records exceed capacity {}", self.len, self.capacity));
        }
        for (key, list) in &self.map {
            if list.is_empty() {
                return Err(format!("empty list left for key {key}"));
            }
            for e in list {
                if self.nodes[e.handle as usize].key != *key {
                    return Err(format!("queue handle of key {key} points at another key"));
                }
            }
        }
        Ok(q.len())
    }
}
