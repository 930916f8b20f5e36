//! Exact k-d tree over a fixed point set.
//!
//! Results are ordered by `(squared distance, index)`, so they coincide with a
//! linear scan that breaks distance ties by the lower point index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

/// Squared Euclidean distance; every query and the reference scans use this
/// exact expression so ties compare bitwise.
#[inline]
pub fn squared_distance(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance_squared: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        self.distance_squared.sqrt()
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        self.distance_squared
            .total_cmp(&other.distance_squared)
            .then(self.index.cmp(&other.index))
    }
}

struct HeapEntry(Neighbor);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.key_cmp(&other.0)
    }
}

/// Spatial index supporting k-nearest and radius queries. Immutable after
/// construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Point3<f64>>,
    /// Tree-ordered permutation of point indices.
    order: Vec<usize>,
    /// Split axis for the node whose median sits at this position.
    axes: Vec<u8>,
}

impl NeighborIndex {
    pub fn build(points: &[Point3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build_node(points, &mut order, &mut axes, 0);
        Ok(Self {
            points: points.to_vec(),
            order,
            axes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    /// The `k` nearest points to `query`, nearest first.
    pub fn knn(&self, query: &Point3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(query, k, 0, self.order.len(), &mut heap);
        let mut out: Vec<Neighbor> = heap.into_iter().map(|e| e.0).collect();
        out.sort_by(Neighbor::key_cmp);
        out
    }

    pub fn nearest(&self, query: &Point3<f64>) -> Neighbor {
        self.knn(query, 1)[0]
    }

    /// All points with distance `<= radius`, nearest first.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if radius.is_nan() || radius < 0.0 {
            return out;
        }
        let r2 = radius * radius;
        self.radius_rec(query, r2, 0, self.order.len(), &mut out);
        out.sort_by(Neighbor::key_cmp);
        out
    }

    fn consider(&self, query: &Point3<f64>, pos: usize, k: usize, heap: &mut BinaryHeap<HeapEntry>) {
        let index = self.order[pos];
        let cand = Neighbor {
            index,
            distance_squared: squared_distance(query, &self.points[index]),
        };
        if heap.len() < k {
            heap.push(HeapEntry(cand));
        } else if let Some(top) = heap.peek() {
            if cand.key_cmp(&top.0) == Ordering::Less {
                heap.pop();
                heap.push(HeapEntry(cand));
            }
        }
    }

    fn knn_rec(
        &self,
        query: &Point3<f64>,
        k: usize,
        lo: usize,
        hi: usize,
        heap: &mut BinaryHeap<HeapEntry>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for pos in lo..hi {
                self.consider(query, pos, k, heap);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axes[mid] as usize;
        let diff = query[axis] - self.points[self.order[mid]][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(query, k, near.0, near.1, heap);
        self.consider(query, mid, k, heap);
        let visit_far = heap.len() < k
            || heap
                .peek()
                .is_some_and(|top| diff * diff <= top.0.distance_squared);
        if visit_far {
            self.knn_rec(query, k, far.0, far.1, heap);
        }
    }

    fn radius_rec(&self, query: &Point3<f64>, r2: f64, lo: usize, hi: usize, out: &mut Vec<Neighbor>) {
        let mut push = |pos: usize| {
            let index = self.order[pos];
            let d2 = squared_distance(query, &self.points[index]);
            if d2 <= r2 {
                out.push(Neighbor {
                    index,
                    distance_squared: d2,
                });
            }
        };
        if hi - lo <= LEAF_SIZE {
            (lo..hi).for_each(push);
            return;
        }
        let mid = lo + (hi - lo) / 2;
        push(mid);
        let axis = self.axes[mid] as usize;
        let diff = query[axis] - self.points[self.order[mid]][axis];
        if diff <= 0.0 || diff * diff <= r2 {
            self.radius_rec(query, r2, lo, mid, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.radius_rec(query, r2, mid + 1, hi, out);
        }
    }
}

fn build_node(points: &[Point3<f64>], order: &mut [usize], axes: &mut [u8], offset: usize) {
    let n = order.len();
    if n <= LEAF_SIZE {
        return;
    }
    let axis = widest_axis(points, order);
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .total_cmp(&points[b][axis])
            .then(a.cmp(&b))
    });
    axes[offset + mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    build_node(points, left, axes, offset);
    build_node(points, &mut rest[1..], axes, offset + mid + 1);
}

fn widest_axis(points: &[Point3<f64>], order: &[usize]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap_or(0)
}
