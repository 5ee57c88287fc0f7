use std::collections::BinaryHeap;

use super::euclidean;

/// Linear scan keeping the best `k` in a bounded max-heap.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    dim: usize,
    data: Vec<f32>,
}

#[derive(PartialEq)]
struct Hit(f32, usize);

impl Eq for Hit {}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Hit {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl ExactIndex {
    pub fn new(dim: usize, data: Vec<f32>) -> Self {
        Self { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(distance, record index)` pairs, nearest first.
    pub fn search(&self, key: &[f32], k: usize) -> Vec<(f32, usize)> {
        let k = k.min(self.len());
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for (i, v) in self.data.chunks_exact(self.dim).enumerate() {
            let d = euclidean(v, key);
            if heap.len() < k {
                heap.push(Hit(d, i));
            } else if let Some(top) = heap.peek() {
                if Hit(d, i) < *top {
                    heap.pop();
                    heap.push(Hit(d, i));
                }
            }
        }
        heap.into_sorted_vec().into_iter().map(|Hit(d, i)| (d, i)).collect()
    }
}
