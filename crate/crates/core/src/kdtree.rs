//! Static k-d tree over fixed-dimension points (3-D positions by default).
//!
//! Queries are exact and deterministic: among equidistant candidates the
//! lowest point index wins, so results never depend on build order.

use nalgebra::SVector;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

pub type KdTree = KdTreeN<3>;

#[derive(Debug)]
pub struct KdTreeN<const D: usize> {
    positions: Vec<SVector<f64, D>>,
    /// Caller-visible index of each stored position.
    ids: Vec<usize>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// A query hit: caller index and squared distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

impl<const D: usize> KdTreeN<D> {
    pub fn new(points: &[SVector<f64, D>]) -> Self {
        Self::with_ids(points.to_vec(), (0..points.len()).collect())
    }

    /// Tree over `points[i]` for the given subset; hits report the original indices.
    pub fn from_subset(points: &[SVector<f64, D>], subset: &[usize]) -> Self {
        let positions = subset.iter().map(|&i| points[i]).collect();
        Self::with_ids(positions, subset.to_vec())
    }

    fn with_ids(positions: Vec<SVector<f64, D>>, ids: Vec<usize>) -> Self {
        let mut tree = KdTreeN {
            order: (0..positions.len()).collect(),
            positions,
            ids,
            nodes: Vec::new(),
        };
        if !tree.positions.is_empty() {
            let n = tree.positions.len();
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = SVector::<f64, D>::repeat(f64::INFINITY);
        let mut hi = SVector::<f64, D>::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.positions[i]);
            hi = hi.sup(&self.positions[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            // All coincident.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let positions = &self.positions;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            positions[a][axis].total_cmp(&positions[b][axis])
        });
        let value = self.positions[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn nearest(&self, query: &SVector<f64, D>) -> Option<Neighbor> {
        self.knn(query, 1).into_iter().next()
    }

    /// The `k` nearest points ordered by `(distance, index)`.
    pub fn knn(&self, query: &SVector<f64, D>, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out
    }

    fn knn_rec(&self, node: usize, q: &SVector<f64, D>, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: self.ids[i],
                        dist2: (self.positions[i] - q).norm_squared(),
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near, q, k, heap);
                // `<=` keeps equal-distance candidates on the far side eligible for the index tie-break.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }

    /// All points with squared distance `<= radius^2`, sorted by `(distance, index)`.
    pub fn within_radius(&self, query: &SVector<f64, D>, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.is_empty() {
            self.radius_rec(0, query, radius * radius, &mut out);
        }
        out.sort();
        out
    }

    fn radius_rec(&self, node: usize, q: &SVector<f64, D>, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let dist2 = (self.positions[i] - q).norm_squared();
                    if dist2 <= r2 {
                        out.push(Neighbor {
                            index: self.ids[i],
                            dist2,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.radius_rec(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.radius_rec(right, q, r2, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn brute_knn(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .map(|(index, p)| Neighbor {
                index,
                dist2: (p - q).norm_squared(),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    #[test]
    fn ties_break_on_lowest_index() {
        let pts = vec![Vector3::new(1.0, 0.0, 0.0); 20];
        let tree = KdTree::new(&pts);
        let hits = tree.knn(&Vector3::zeros(), 3);
        let idx: Vec<usize> = hits.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn subset_reports_original_indices() {
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let tree = KdTree::from_subset(&pts, &[3, 7, 9]);
        assert_eq!(tree.nearest(&Vector3::new(6.4, 0.0, 0.0)).unwrap().index, 7);
    }

    proptest! {
        #[test]
        fn knn_matches_brute_force(
            raw in prop::collection::vec((-3i32..3, -3i32..3, -3i32..3), 1..200),
            q in (-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64),
            k in 1usize..12,
        ) {
            // Integer lattice coordinates force many exact ties.
            let pts: Vec<_> = raw.iter().map(|&(a, b, c)| Vector3::new(a as f64, b as f64, c as f64)).collect();
            let q = Vector3::new(q.0, q.1, q.2);
            let tree = KdTree::new(&pts);
            prop_assert_eq!(tree.knn(&q, k), brute_knn(&pts, &q, k));
            let r = 1.5;
            let mut expect: Vec<Neighbor> = brute_knn(&pts, &q, pts.len())
                .into_iter().filter(|n| n.dist2 <= r * r).collect();
            expect.sort();
            prop_assert_eq!(tree.within_radius(&q, r), expect);
        }
    }
}
