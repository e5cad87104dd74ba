//! Exact k-nearest-neighbour search over Euclidean distance.
//!
//! A bucketed k-d tree. Results are ordered by `(distance, row index)`, so
//! equidistant points always resolve to the lower row index and every query
//! agrees with an exhaustive scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct NeighborIndex {
    dim: usize,
    points: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist_sq: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NeighborIndex {
    /// Builds the tree over row-major `points` (`n x dim`).
    pub fn build(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("index dimension must be positive"));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "index needs at least one {dim}-d point, got {} values",
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding coordinate".into()));
        }
        let n = points.len() / dim;
        let mut index = NeighborIndex {
            dim,
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, n);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end);
        let mid = start + (end - start) / 2;
        {
            let points = &self.points;
            let d = self.dim;
            let key = |i: &usize| (points[*i * d + dim], *i);
            self.order[start..end].select_nth_unstable_by(mid - start, |a, b| {
                let (ka, kb) = (key(a), key(b));
                ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
            });
        }
        let value = self.points[self.order[mid] * self.dim + dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..self.dim {
            let (lo, hi) = self.order[start..end]
                .iter()
                .map(|&i| self.points[i * self.dim + j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            if hi - lo > best.1 {
                best = (j, hi - lo);
            }
        }
        best.0
    }

    fn dist_sq(&self, query: &[f64], i: usize) -> f64 {
        query
            .iter()
            .zip(self.point(i))
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }

    /// The `k` nearest stored points to `query`, nearest first, skipping row `exclude`.
    pub fn knn(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: query.len() });
        }
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k == 0 || k > available {
            return Err(Error::invalid(format!(
                "k = {k} must be in 1..={available} for this index"
            )));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        Ok(out
            .into_iter()
            .map(|c| Neighbor { index: c.index, distance: c.dist_sq.sqrt() })
            .collect())
    }

    pub fn nearest(&self, query: &[f64]) -> Result<Neighbor> {
        Ok(self.knn(query, 1, None)?[0])
    }

    fn search(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = Candidate { dist_sq: self.dist_sq(query, i), index: i };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, heap);
                // equal-distance points on the far side may still win on index
                let must_visit = heap.len() < k
                    || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.dist_sq);
                if must_visit {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}
