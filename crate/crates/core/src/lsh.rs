//! Random-hyperplane locality-sensitive index.
//!
//! Each of `tables` hash tables assigns a vector a `bits`-bit code, one sign
//! bit per seeded unit-norm hyperplane. Two vectors at angle theta agree on
//! a given bit with probability 1 - theta/pi, so exact-code buckets
//! concentrate near-duplicates while distant vectors spread out. Queries
//! union the exact buckets across tables and re-rank candidates exactly, so
//! returned neighbors are true similarities over a sublinear candidate set.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Densities below this floor are clamped before the diversity signal takes
/// a log, bounding the signal at -ln(1e-12) ~ 27.63.
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LshStats {
    pub size: usize,
    pub queries: u64,
    pub candidates_examined: u64,
    /// Mean candidates per query; 0 before any query.
    pub mean_candidates: f64,
}

#[derive(Debug)]
pub struct LshIndex {
    dim: usize,
    bits: usize,
    /// One flattened bits x dim projection per table, rows unit-norm.
    projections: Vec<Vec<f64>>,
    /// Per table: code -> ids in insertion order.
    buckets: Vec<HashMap<u64, Vec<u64>>>,
    store: HashMap<u64, Vec<f64>>,
    queries: AtomicU64,
    candidates_examined: AtomicU64,
}

impl LshIndex {
    pub fn new(dim: usize, bits: usize, tables: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("lsh dim must be positive".into()));
        }
        if bits == 0 || bits > 64 {
            return Err(Error::Config(format!("lsh bits {bits} not in 1..=64")));
        }
        if tables == 0 {
            return Err(Error::Config("lsh needs at least one table".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projections = Vec::with_capacity(tables);
        for _ in 0..tables {
            let mut proj = vec![0.0; bits * dim];
            for row in proj.chunks_mut(dim) {
                loop {
                    for v in row.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for v in row.iter_mut() {
                            *v /= norm;
                        }
                        break;
                    }
                }
            }
            projections.push(proj);
        }
        Ok(LshIndex {
            dim,
            bits,
            projections,
            buckets: vec![HashMap::new(); tables],
            store: HashMap::new(),
            queries: AtomicU64::new(0),
            candidates_examined: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector dim {} != index dim {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite vector".into()));
        }
        Ok(())
    }

    /// Hash codes of `v`, one per table. Bit j is set when the dot product
    /// with hyperplane j is non-negative.
    pub fn codes(&self, v: &[f64]) -> Result<Vec<u64>> {
        self.check_vector(v)?;
        Ok(self
            .projections
            .iter()
            .map(|proj| {
                let mut code = 0u64;
                for (j, row) in proj.chunks(self.dim).enumerate() {
                    let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                    if dot >= 0.0 {
                        code |= 1 << j;
                    }
                }
                code
            })
            .collect())
    }

    pub fn insert(&mut self, id: u64, v: &[f64]) -> Result<()> {
        if self.store.contains_key(&id) {
            return Err(Error::Duplicate(format!("lsh id {id}")));
        }
        let codes = self.codes(v)?;
        for (table, code) in self.buckets.iter_mut().zip(codes) {
            table.entry(code).or_default().push(id);
        }
        self.store.insert(id, v.to_vec());
        Ok(())
    }

    /// Ids sharing at least one exact bucket with `q`, sorted ascending for
    /// determinism. Counts toward the candidate statistics.
    fn retrieve(&self, q: &[f64]) -> Result<Vec<u64>> {
        let codes = self.codes(q)?;
        let mut candidates: Vec<u64> = Vec::new();
        for (table, code) in self.buckets.iter().zip(codes) {
            if let Some(ids) = table.get(&code) {
                candidates.extend_from_slice(ids);
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.candidates_examined
            .fetch_add(candidates.len() as u64, Ordering::Relaxed);
        Ok(candidates)
    }

    /// Approximate nearest neighbors: bucket candidates re-ranked by exact
    /// cosine similarity, descending, ties broken by id. Returns at most
    /// `top_k` pairs of `(id, similarity)`; fewer (possibly none) when the
    /// buckets are sparse. Zero-norm queries have no direction and are
    /// rejected.
    pub fn query(&self, q: &[f64], top_k: usize) -> Result<Vec<(u64, f64)>> {
        let qnorm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qnorm == 0.0 {
            return Err(Error::DegenerateVector("zero-norm lsh query".into()));
        }
        let candidates = self.retrieve(q)?;
        let mut ranked: Vec<(u64, f64)> = candidates
            .into_iter()
            .map(|id| {
                let v = &self.store[&id];
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let sim = if vnorm == 0.0 { 0.0 } else { dot / (qnorm * vnorm) };
                (id, sim)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        Ok(ranked)
    }

    /// Truncated Gaussian kernel density of `q` against the stored points:
    /// the `top_k` bucket candidates nearest in Euclidean distance
    /// contribute exp(-||q - v||^2 / (2 sigma^2)), the sum is averaged over
    /// `total_seen`, and the result is floored at [`DENSITY_FLOOR`]. An
    /// empty index reports the floor.
    pub fn kernel_density(
        &self,
        q: &[f64],
        sigma: f64,
        top_k: usize,
        total_seen: usize,
    ) -> Result<f64> {
        if sigma <= 0.0 {
            return Err(Error::Config(format!("bandwidth {sigma} must be positive")));
        }
        if total_seen == 0 {
            return Err(Error::Config("total_seen must be positive".into()));
        }
        if self.store.is_empty() {
            return Ok(DENSITY_FLOOR);
        }
        let candidates = self.retrieve(q)?;
        let mut dists: Vec<(f64, u64)> = candidates
            .into_iter()
            .map(|id| {
                let v = &self.store[&id];
                let d2: f64 = v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, id)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        dists.truncate(top_k);
        let sum: f64 = dists
            .iter()
            .map(|(d2, _)| (-d2 / (2.0 * sigma * sigma)).exp())
            .sum();
        Ok((sum / total_seen as f64).clamp(DENSITY_FLOOR, 1.0))
    }

    pub fn stats(&self) -> LshStats {
        let queries = self.queries.load(Ordering::Relaxed);
        let candidates = self.candidates_examined.load(Ordering::Relaxed);
        LshStats {
            size: self.store.len(),
            queries,
            candidates_examined: candidates,
            mean_candidates: if queries == 0 {
                0.0
            } else {
                candidates as f64 / queries as f64
            },
        }
    }
}
