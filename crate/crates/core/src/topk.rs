//! Bounded top-k selection.
//!
//! Scores are ordered with `f32::total_cmp`; among equal scores the lower id
//! ranks first.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    score: f32,
    id: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    /// Greater means ranked higher: larger score, then smaller id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `k` highest-ranked `(id, score)` pairs pushed so far.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Entry>>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Lowest-ranked entry currently kept, once the heap is full.
    #[inline]
    pub fn threshold(&self) -> Option<f32> {
        if self.heap.len() < self.k {
            None
        } else {
            self.heap.peek().map(|e| e.0.score)
        }
    }

    #[inline]
    pub fn push(&mut self, id: u32, score: f32) {
        if self.k == 0 {
            return;
        }
        let e = Entry { score, id };
        if self.heap.len() < self.k {
            self.heap.push(Reverse(e));
        } else if let Some(mut low) = self.heap.peek_mut() {
            if e > low.0 {
                *low = Reverse(e);
            }
        }
    }

    /// Kept entries, best first.
    pub fn into_sorted(self) -> Vec<(u32, f32)> {
        let mut v: Vec<Entry> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v.into_iter().map(|e| (e.id, e.score)).collect()
    }
}

/// Top `k` of `scores` indexed by position.
pub fn top_k(scores: &[f32], k: usize) -> Vec<(u32, f32)> {
    let mut t = TopK::new(k);
    for (i, &s) in scores.iter().enumerate() {
        t.push(i as u32, s);
    }
    t.into_sorted()
}

/// Full ranking by the same order as [`TopK`], used as an oracle.
pub fn full_sort(scores: &[f32]) -> Vec<(u32, f32)> {
    let mut v: Vec<(u32, f32)> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}
