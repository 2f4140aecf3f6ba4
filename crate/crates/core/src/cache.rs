//! Capacity-bounded TTL cache with least-recently-used eviction.
//!
//! Backs the recursive resolver's referral, tailored-answer, and negative
//! caches. Entries expire at `inserted_at + ttl` against an injected clock;
//! expired entries are never returned. Recency is tracked on both get and
//! put, and the oldest entry is evicted when capacity is exceeded.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use crate::clock::TimestampMs;

#[derive(Debug, Clone)]
struct Slot<V> {
    value: V,
    inserted_at: TimestampMs,
    ttl_ms: u64,
    recency: u64,
}

/// TTL + LRU map. Not internally synchronized; wrap in a lock to share.
#[derive(Debug)]
pub struct TtlCache<K: Eq + Hash + Clone, V> {
    capacity: usize,
    entries: HashMap<K, Slot<V>>,
    by_recency: BTreeMap<u64, K>,
    tick: u64,
    evicted: Vec<K>,
}

impl<K: Eq + Hash + Clone, V: Clone> TtlCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: HashMap::new(),
            by_recency: BTreeMap::new(),
            tick: 0,
            evicted: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or overwrites; evicts the least-recently-used entry when
    /// over capacity. A ttl of zero expires immediately.
    pub fn put(&mut self, key: K, value: V, ttl_ms: u64, now: TimestampMs) {
        self.tick += 1;
        if let Some(old) = self.entries.remove(&key) {
            self.by_recency.remove(&old.recency);
        }
        self.by_recency.insert(self.tick, key.clone());
        self.entries.insert(key, Slot { value, inserted_at: now, ttl_ms, recency: self.tick });
        while self.entries.len() > self.capacity {
            if let Some((_, victim)) = self.by_recency.pop_first() {
                self.entries.remove(&victim);
                self.evicted.push(victim);
            } else {
                break;
            }
        }
    }

    /// Returns the live value and refreshes its recency; expired entries
    /// are dropped and reported as misses.
    pub fn get(&mut self, key: &K, now: TimestampMs) -> Option<V> {
        let expired = match self.entries.get(key) {
            None => return None,
            Some(slot) => now.saturating_sub(slot.inserted_at) >= slot.ttl_ms,
        };
        if expired {
            self.remove(key);
            return None;
        }
        self.tick += 1;
        let slot = self.entries.get_mut(key).expect("checked above");
        self.by_recency.remove(&slot.recency);
        slot.recency = self.tick;
        self.by_recency.insert(self.tick, key.clone());
        Some(slot.value.clone())
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let slot = self.entries.remove(key)?;
        self.by_recency.remove(&slot.recency);
        Some(slot.value)
    }

    /// Keys evicted by capacity pressure since the last call.
    pub fn take_evicted(&mut self) -> Vec<K> {
        std::mem::take(&mut self.evicted)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.by_recency.clear();
        self.evicted.clear();
    }
}
