//! Proxy-side element cache with least-recently-used eviction.
//!
//! The cache absorbs repeat reads so they never reach the batching layer,
//! which is both a latency win and free traffic hiding: a cache hit is
//! invisible to the storage server. Eviction is safe at any moment because
//! a buffered write lives in the pending-query map until its batch lands;
//! losing the cached copy costs a forwarded read, never correctness.

use std::collections::HashMap;

use crate::model::LogicalAddress;

const NIL: usize = usize::MAX;

struct Node {
    key: LogicalAddress,
    value: Vec<u8>,
    prev: usize,
    next: usize,
}

pub struct LruCache {
    cap: usize,
    map: HashMap<LogicalAddress, usize>,
    nodes: Vec<Node>,
    free: Vec<usize>,
    head: usize,
    tail: usize,
}

impl LruCache {
    pub fn new(cap: usize) -> Self {
        LruCache {
            cap,
            map: HashMap::with_capacity(cap.min(1 << 20)),
            nodes: Vec::with_capacity(cap.min(1 << 20)),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
        }
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Membership test that does not disturb recency. Lets batch results
    /// fill gaps without outranking or clobbering entries placed by client
    /// activity.
    pub fn contains(&self, key: LogicalAddress) -> bool {
        self.map.contains_key(&key)
    }

    /// Looks the key up and marks it most recently used.
    pub fn get(&mut self, key: LogicalAddress) -> Option<&[u8]> {
        let &idx = self.map.get(&key)?;
        self.detach(idx);
        self.attach_front(idx);
        Some(&self.nodes[idx].value)
    }

    /// Inserts or replaces, marking the key most recently used and evicting
    /// the coldest entry if full.
    pub fn insert(&mut self, key: LogicalAddress, value: Vec<u8>) {
        if self.cap == 0 {
            return;
        }
        if let Some(&idx) = self.map.get(&key) {
            self.nodes[idx].value = value;
            self.detach(idx);
            self.attach_front(idx);
            return;
        }
        if self.map.len() == self.cap {
            let coldest = self.tail;
            self.detach(coldest);
            let old = &mut self.nodes[coldest];
            self.map.remove(&old.key);
            self.free.push(coldest);
        }
        let idx = match self.free.pop() {
            Some(i) => {
                self.nodes[i] = Node { key, value, prev: NIL, next: NIL };
                i
            }
            None => {
                self.nodes.push(Node { key, value, prev: NIL, next: NIL });
                self.nodes.len() - 1
            }
        };
        self.map.insert(key, idx);
        self.attach_front(idx);
    }

    fn detach(&mut self, idx: usize) {
        let (prev, next) = (self.nodes[idx].prev, self.nodes[idx].next);
        if prev != NIL {
            self.nodes[prev].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.nodes[next].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn attach_front(&mut self, idx: usize) {
        self.nodes[idx].prev = NIL;
        self.nodes[idx].next = self.head;
        if self.head != NIL {
            self.nodes[self.head].prev = idx;
        }
        self.head = idx;
        if self.tail == NIL {
            self.tail = idx;
        }
    }
}
