//! Two-dimensional k-d tree for k-nearest-neighbor queries in pixel space.
//!
//! Neighbors are ordered by `(squared distance, v, u)`, so results are fully
//! deterministic and match an exhaustive scan exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Clone, Copy, Debug)]
struct Entry {
    u: f64,
    v: f64,
    item: usize,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    entry: Entry,
    axis: u8,
    left: Option<usize>,
    right: Option<usize>,
}

/// Neighbor returned by a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub u: f64,
    pub v: f64,
    /// Index of the point in the slice the tree was built from.
    pub item: usize,
}

impl Neighbor {
    /// Total order used for ranking: distance, then row, then column.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.v.total_cmp(&other.v))
            .then(self.u.total_cmp(&other.u))
    }
}

struct Ranked(Neighbor);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

pub(crate) fn squared_distance(qu: f64, qv: f64, u: f64, v: f64) -> f64 {
    let du = qu - u;
    let dv = qv - v;
    du * du + dv * dv
}

pub struct KdTree {
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[(f64, f64)]) -> Self {
        let mut entries: Vec<Entry> = points
            .iter()
            .enumerate()
            .map(|(item, &(u, v))| Entry { u, v, item })
            .collect();
        let mut nodes = Vec::with_capacity(entries.len());
        let root = Self::build_rec(&mut entries, 0, &mut nodes);
        Self { nodes, root }
    }

    fn build_rec(entries: &mut [Entry], depth: usize, nodes: &mut Vec<Node>) -> Option<usize> {
        if entries.is_empty() {
            return None;
        }
        let axis = (depth % 2) as u8;
        let key = |e: &Entry| if axis == 0 { (e.u, e.v) } else { (e.v, e.u) };
        entries.sort_by(|a, b| {
            let (a0, a1) = key(a);
            let (b0, b1) = key(b);
            a0.total_cmp(&b0).then(a1.total_cmp(&b1))
        });
        let mid = entries.len() / 2;
        let entry = entries[mid];
        let (lo, rest) = entries.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(lo, depth + 1, nodes);
        let right = Self::build_rec(hi, depth + 1, nodes);
        nodes.push(Node {
            entry,
            axis,
            left,
            right,
        });
        Some(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Up to `k` nearest points to `(u, v)`, sorted by rank.
    pub fn nearest(&self, u: f64, v: f64, k: usize) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            if let Some(root) = self.root {
                self.search(root, u, v, k, &mut heap);
            }
        }
        let mut out: Vec<Neighbor> = heap.into_iter().map(|r| r.0).collect();
        out.sort_by(Neighbor::rank_cmp);
        out
    }

    fn search(&self, idx: usize, qu: f64, qv: f64, k: usize, heap: &mut BinaryHeap<Ranked>) {
        let node = &self.nodes[idx];
        let e = node.entry;
        let cand = Neighbor {
            dist2: squared_distance(qu, qv, e.u, e.v),
            u: e.u,
            v: e.v,
            item: e.item,
        };
        if heap.len() < k {
            heap.push(Ranked(cand));
        } else if cand.rank_cmp(&heap.peek().unwrap().0) == Ordering::Less {
            heap.pop();
            heap.push(Ranked(cand));
        }

        let diff = if node.axis == 0 { qu - e.u } else { qv - e.v };
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, qu, qv, k, heap);
        }
        if let Some(f) = far {
            let room = heap.len() < k;
            if room || diff * diff <= heap.peek().unwrap().0.dist2 {
                self.search(f, qu, qv, k, heap);
            }
        }
    }
}
