//! Version-keyed LRU cache of per-sample evaluations.
//!
//! Valuation touches each candidate's forward trace and gradients several
//! times per round; this cache makes repeat evaluations under an unchanged
//! model free. Keys combine a 64-bit digest of the canonical `(x, y)` bytes
//! with the exact model version, so any parameter update silently misses
//! instead of serving stale gradients. On a digest hit the stored canonical
//! bytes are compared in full, so a hash collision degrades to a miss, never
//! to a wrong answer.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mlp::{LossKind, MlpModel, SampleEval, Target};

/// Default cache capacity used by the selection engine.
pub const DEFAULT_CAPACITY: usize = 4096;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Canonical little-endian byte encoding of a sample. Feature bytes come
/// first, then a target tag and the target payload, so `(x, y)` pairs that
/// differ anywhere encode differently.
pub fn canonical_bytes(x: &[f64], y: &Target) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * x.len() + 16);
    for v in x {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match y {
        Target::Class(c) => {
            out.push(0);
            out.extend_from_slice(&(*c as u64).to_le_bytes());
        }
        Target::Values(vals) => {
            out.push(1);
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// FNV-1a digest of the canonical sample bytes. This digest doubles as the
/// sample identity everywhere dedup is needed (cache keys, selection).
pub fn sample_digest(x: &[f64], y: &Target) -> u64 {
    fnv1a(&canonical_bytes(x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub digest: u64,
    pub model_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// hits / (hits + misses); 0 when nothing has been looked up.
    pub hit_rate: f64,
    pub occupancy: usize,
    pub capacity: usize,
}

#[derive(Debug)]
struct Entry {
    bytes: Vec<u8>,
    eval: Arc<SampleEval>,
    tick: u64,
}

/// Bounded LRU cache from `(digest, model_version)` to a shared
/// [`SampleEval`]. Recency is tracked with a monotone tick and a
/// `BTreeMap<tick, key>`, so eviction picks the least recently used entry
/// deterministically.
#[derive(Debug)]
pub struct GradCache {
    capacity: usize,
    map: HashMap<CacheKey, Entry>,
    recency: BTreeMap<u64, CacheKey>,
    tick: u64,
    hits: u64,
    misses: u64,
}

impl GradCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("cache capacity must be at least 1".into()));
        }
        Ok(GradCache {
            capacity,
            map: HashMap::new(),
            recency: BTreeMap::new(),
            tick: 0,
            hits: 0,
            misses: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn touch(&mut self, key: CacheKey) {
        self.tick += 1;
        let entry = self.map.get_mut(&key).expect("touched key present");
        self.recency.remove(&entry.tick);
        entry.tick = self.tick;
        self.recency.insert(self.tick, key);
    }

    /// Returns the evaluation for `(x, y)` under the model's current
    /// version, computing and storing it on a miss. Errors from the
    /// underlying evaluation propagate without caching anything.
    pub fn get_or_compute(
        &mut self,
        model: &MlpModel,
        x: &[f64],
        y: &Target,
        loss: &LossKind,
    ) -> Result<Arc<SampleEval>> {
        let bytes = canonical_bytes(x, y);
        let key = CacheKey {
            digest: fnv1a(&bytes),
            model_version: model.version(),
        };
        if let Some(entry) = self.map.get(&key) {
            if entry.bytes == bytes {
                self.hits += 1;
                let eval = Arc::clone(&entry.eval);
                self.touch(key);
                return Ok(eval);
            }
            // Digest collision: recompute and let the new sample take the
            // slot. Counted as a miss.
        }
        self.misses += 1;
        let eval = Arc::new(model.evaluate(x, y, loss)?);
        if let Some(old) = self.map.get(&key) {
            // Collision replacement: reuse the slot, no eviction needed.
            self.recency.remove(&old.tick);
        } else if self.map.len() >= self.capacity {
            let (_, victim) = self.recency.pop_first().expect("non-empty recency");
            self.map.remove(&victim);
        }
        self.tick += 1;
        self.map.insert(
            key,
            Entry {
                bytes,
                eval: Arc::clone(&eval),
                tick: self.tick,
            },
        );
        self.recency.insert(self.tick, key);
        Ok(eval)
    }

    pub fn stats(&self) -> CacheStats {
        let total = self.hits + self.misses;
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            hit_rate: if total == 0 {
                0.0
            } else {
                self.hits as f64 / total as f64
            },
            occupancy: self.map.len(),
            capacity: self.capacity,
        }
    }

    pub fn reset_stats(&mut self) {
        self.hits = 0;
        self.misses = 0;
    }
}
