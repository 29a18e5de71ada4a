//! Exact k-nearest-neighbour search over voxel coordinates.
//!
//! Distances are computed on integer coordinates as exact squared
//! distances, so results are bitwise reproducible. Ties are broken by the
//! lower point index.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Per-query neighbour lists: row `i` holds the `k` nearest target points
/// of query `i`, nearest first, with unsquared Euclidean distances.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<u32>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    /// Builds an index from flat row-major data. Rows must be sorted by distance.
    pub fn from_parts(k: usize, indices: Vec<u32>, distances: Vec<f64>) -> Result<Self> {
        if k == 0 || indices.len() != distances.len() || indices.len() % k != 0 {
            return Err(Error::Shape(format!(
                "neighbour lists of {} indices / {} distances do not form rows of k = {k}",
                indices.len(),
                distances.len()
            )));
        }
        Ok(NeighborIndex { k, indices, distances })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

fn dist2(a: &[u32; 3], b: &[u32; 3]) -> u64 {
    let mut s = 0u64;
    for c in 0..3 {
        let d = i64::from(a[c]) - i64::from(b[c]);
        s += (d * d) as u64;
    }
    s
}

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: u32, left: usize, right: usize },
}

/// A static k-d tree over a geometry set. Immutable after build.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<[u32; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(geometry: &[[u32; 3]]) -> Result<Self> {
        if geometry.is_empty() {
            return Err(Error::InvalidCloud("cannot index an empty geometry set".into()));
        }
        if geometry.len() > u32::MAX as usize {
            return Err(Error::InvalidCloud("too many points to index".into()));
        }
        let mut index = SpatialIndex {
            points: geometry.to_vec(),
            order: (0..geometry.len() as u32).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, geometry.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = {
            let mut lo = [u32::MAX; 3];
            let mut hi = [0u32; 3];
            for &i in &self.order[start..end] {
                let p = self.points[i as usize];
                for c in 0..3 {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
            (0..3).max_by_key(|&c| (hi[c] - lo[c], std::cmp::Reverse(c))).unwrap()
        };
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by_key(mid - start, |&i| (points[i as usize][axis], i));
        let value = self.points[self.order[mid] as usize][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[u32; 3]] {
        &self.points
    }

    /// The `k` nearest points to `query` as `(squared distance, index)`, nearest first.
    pub fn nearest(&self, query: &[u32; 3], k: usize) -> Result<Vec<(u64, u32)>> {
        if k > self.len() {
            return Err(Error::KTooLarge { k, n: self.len() });
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(0, query, k, &mut heap);
        }
        Ok(heap.into_sorted_vec())
    }

    fn search(&self, node: usize, q: &[u32; 3], k: usize, heap: &mut BinaryHeap<(u64, u32)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(q, &self.points[i as usize]), i);
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = i64::from(q[axis]) - i64::from(value);
                let (near, far) = if diff < 0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                let plane = (diff * diff) as u64;
                if heap.len() < k || plane <= heap.peek().unwrap().0 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }

    pub fn query_knn(&self, queries: &[[u32; 3]], k: usize) -> Result<NeighborIndex> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if k > self.len() {
            return Err(Error::KTooLarge { k, n: self.len() });
        }
        let mut indices = Vec::with_capacity(queries.len() * k);
        let mut distances = Vec::with_capacity(queries.len() * k);
        for q in queries {
            for (d2, i) in self.nearest(q, k)? {
                indices.push(i);
                distances.push((d2 as f64).sqrt());
            }
        }
        NeighborIndex::from_parts(k, indices, distances)
    }
}

pub fn build_index(geometry: &[[u32; 3]]) -> Result<SpatialIndex> {
    SpatialIndex::build(geometry)
}

pub fn query_knn(index: &SpatialIndex, queries: &[[u32; 3]], k: usize) -> Result<NeighborIndex> {
    index.query_knn(queries, k)
}

/// Reference implementation by full pairwise scan.
pub fn brute_force_knn(geometry: &[[u32; 3]], queries: &[[u32; 3]], k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > geometry.len() {
        return Err(Error::KTooLarge { k, n: geometry.len() });
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut distances = Vec::with_capacity(queries.len() * k);
    let mut all: Vec<(u64, u32)> = Vec::with_capacity(geometry.len());
    for q in queries {
        all.clear();
        all.extend(geometry.iter().enumerate().map(|(i, p)| (dist2(q, p), i as u32)));
        all.sort_unstable();
        for &(d2, i) in &all[..k] {
            indices.push(i);
            distances.push((d2 as f64).sqrt());
        }
    }
    NeighborIndex::from_parts(k, indices, distances)
}

/// Self-query of a geometry set: row `i` starts with `i` itself at distance 0
/// when coordinates are unique.
pub fn self_knn(geometry: &[[u32; 3]], k: usize) -> Result<NeighborIndex> {
    SpatialIndex::build(geometry)?.query_knn(geometry, k)
}
