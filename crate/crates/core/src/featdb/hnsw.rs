//! Hierarchical navigable small-world graph.
//!
//! Construction is sequential in record order with a seeded level generator,
//! so one set of records and parameters always yields the same graph.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{neighbor_order, squared_distance};
use crate::error::{Error, Result};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    /// Candidate list size at query time (raised to `k` when smaller).
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 160,
            seed: 0x5eed,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::InvalidConfig(format!("hnsw parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Cand(f32, u32);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Scratch visited-set that clears only what it touched.
struct Visited {
    seen: Vec<bool>,
    touched: Vec<u32>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            seen: vec![false; n],
            touched: Vec::new(),
        }
    }

    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.seen[id as usize];
        if *slot {
            return false;
        }
        *slot = true;
        self.touched.push(id);
        true
    }

    fn clear(&mut self) {
        for id in self.touched.drain(..) {
            self.seen[id as usize] = false;
        }
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    dim: usize,
    data: Vec<f32>,
    params: HnswParams,
    /// `links[node][layer]`, present for layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    top_level: usize,
}

impl HnswIndex {
    pub fn build(dim: usize, data: Vec<f32>, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let n = data.len() / dim;
        if n == 0 {
            return Err(Error::EmptyDatabase);
        }
        if n > u32::MAX as usize {
            return Err(Error::InvalidValue(format!("{n} records exceed the graph index limit")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.m as f64).ln();
        let mut index = Self {
            dim,
            data,
            params,
            links: Vec::with_capacity(n),
            entry: 0,
            top_level: 0,
        };
        let mut visited = Visited::new(n);
        for id in 0..n {
            let u: f64 = rng.random();
            let level = ((-(1.0 - u).ln() * level_mult).floor() as usize).min(MAX_LEVEL);
            index.insert(id as u32, level, &mut visited);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    fn vector(&self, id: u32) -> &[f32] {
        let start = id as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    fn dist(&self, a: &[f32], id: u32) -> f32 {
        squared_distance(a, self.vector(id))
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, id: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        if id == 0 {
            self.entry = 0;
            self.top_level = level;
            return;
        }
        let query = self.vector(id).to_vec();
        let mut ep = Cand(self.dist(&query, self.entry), self.entry);
        for layer in (level + 1..=self.top_level).rev() {
            ep = self.greedy(&query, ep, layer);
        }
        let mut entries = vec![ep];
        for layer in (0..=level.min(self.top_level)).rev() {
            let found = self.search_layer(&query, &entries, self.params.ef_construction, layer, visited);
            let chosen = self.select(&found, self.params.m);
            self.links[id as usize][layer] = chosen.iter().map(|c| c.1).collect();
            for c in &chosen {
                self.connect(c.1, id, layer);
            }
            entries = found;
        }
        if level > self.top_level {
            self.top_level = level;
            self.entry = id;
        }
    }

    /// Adds `new` to `node`'s links, re-pruning when the list overflows.
    fn connect(&mut self, node: u32, new: u32, layer: usize) {
        let cap = self.max_links(layer);
        let list = &mut self.links[node as usize][layer];
        list.push(new);
        if list.len() <= cap {
            return;
        }
        let base = self.vector(node).to_vec();
        let mut cands: Vec<Cand> = self.links[node as usize][layer]
            .iter()
            .map(|&n| Cand(self.dist(&base, n), n))
            .collect();
        cands.sort();
        let kept = self.select(&cands, cap);
        self.links[node as usize][layer] = kept.iter().map(|c| c.1).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every already kept one, then top up with the closest rejects.
    /// `cands` must be sorted ascending.
    fn select(&self, cands: &[Cand], m: usize) -> Vec<Cand> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut rejected = Vec::new();
        for &c in cands {
            if kept.len() >= m {
                break;
            }
            let v = self.vector(c.1);
            if kept.iter().all(|k| self.dist(v, k.1) > c.0) {
                kept.push(c);
            } else {
                rejected.push(c);
            }
        }
        for c in rejected {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn greedy(&self, query: &[f32], mut best: Cand, layer: usize) -> Cand {
        loop {
            let mut improved = false;
            for &n in &self.links[best.1 as usize][layer] {
                let c = Cand(self.dist(query, n), n);
                if c < best {
                    best = c;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Best-first search on one layer; result sorted ascending.
    fn search_layer(
        &self,
        query: &[f32],
        entries: &[Cand],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        let mut frontier = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.1) {
                frontier.push(Reverse(e));
                best.push(e);
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().unwrap() {
                break;
            }
            for &n in &self.links[c.1 as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let cand = Cand(self.dist(query, n), n);
                if best.len() < ef || cand < *best.peek().unwrap() {
                    frontier.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        visited.clear();
        best.into_sorted_vec()
    }

    /// `(distance, record index)` pairs, nearest first.
    pub fn search(&self, key: &[f32], k: usize) -> Vec<(f32, usize)> {
        let mut ep = Cand(self.dist(key, self.entry), self.entry);
        for layer in (1..=self.top_level).rev() {
            ep = self.greedy(key, ep, layer);
        }
        let mut visited = Visited::new(self.len());
        let ef = self.params.ef_search.max(k);
        let mut hits: Vec<(f32, usize)> = self
            .search_layer(key, &[ep], ef, 0, &mut visited)
            .into_iter()
            .map(|c| (c.0.sqrt(), c.1 as usize))
            .collect();
        hits.sort_by(neighbor_order);
        hits.truncate(k);
        hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(HnswParams::default().validate().is_ok());
        let bad = HnswParams {
            m: 1,
            ..HnswParams::default()
        };
        assert!(HnswIndex::build(2, vec![1.0, 0.0], bad).is_err());
    }

    #[test]
    fn deterministic_graph() {
        let data: Vec<f32> = (0..400).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect();
        let a = HnswIndex::build(4, data.clone(), HnswParams::default()).unwrap();
        let b = HnswIndex::build(4, data, HnswParams::default()).unwrap();
        assert_eq!(a.links, b.links);
        assert_eq!((a.entry, a.top_level), (b.entry, b.top_level));
    }

    #[test]
    fn link_lists_respect_caps() {
        let data: Vec<f32> = (0..3000).map(|i| ((i * 104729) % 997) as f32 / 997.0 - 0.5).collect();
        let ix = HnswIndex::build(
            3,
            data,
            HnswParams {
                m: 4,
                ..HnswParams::default()
            },
        )
        .unwrap();
        for node in &ix.links {
            for (layer, list) in node.iter().enumerate() {
                assert!(list.len() <= ix.max_links(layer));
            }
        }
    }
}
