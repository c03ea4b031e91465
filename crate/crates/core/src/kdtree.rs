//! Exact k-nearest-neighbour search over dense points with a KD-tree.

use alloc::vec::Vec;

/// Points are stored by reference to their index in the build slice.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<Vec<f64>>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbour candidate, ordered by distance then index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub sq_dist: f64,
}

impl Neighbor {
    fn before(&self, other: &Neighbor) -> bool {
        self.sq_dist < other.sq_dist || (self.sq_dist == other.sq_dist && self.index < other.index)
    }
}

impl KdTree {
    /// All points must share one dimension.
    pub fn build(points: Vec<Vec<f64>>) -> Self {
        let dim = points.first().map_or(0, |p| p.len());
        let mut tree = Self {
            dim,
            points,
            nodes: Vec::new(),
            root: None,
        };
        let mut idx: Vec<usize> = (0..tree.points.len()).collect();
        tree.root = tree.build_rec(&mut idx);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        // Split on the axis of widest spread.
        let mut axis = 0;
        let mut best = -1.0;
        for a in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in idx.iter() {
                let v = self.points[i][a];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best {
                best = hi - lo;
                axis = a;
            }
        }
        let mid = idx.len() / 2;
        {
            let pts = &self.points;
            idx.select_nth_unstable_by(mid, |&a, &b| {
                pts[a][axis]
                    .partial_cmp(&pts[b][axis])
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
        }
        let point = idx[mid];
        let node = self.nodes.len();
        self.nodes.push(Node {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build_rec(lo);
        let right = self.build_rec(&mut hi[1..]);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    /// The `k` points closest to `query`, nearest first. `exclude` skips one
    /// stored index (the query's own).
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 {
            if let Some(r) = self.root {
                self.search(r, query, k, exclude, &mut best);
            }
        }
        best
    }

    fn search(&self, n: usize, q: &[f64], k: usize, exclude: Option<usize>, best: &mut Vec<Neighbor>) {
        let node = &self.nodes[n];
        if exclude != Some(node.point) {
            let cand = Neighbor {
                index: node.point,
                sq_dist: sq_dist(q, &self.points[node.point]),
            };
            if best.len() < k || cand.before(&best[best.len() - 1]) {
                let pos = best.iter().position(|b| cand.before(b)).unwrap_or(best.len());
                best.insert(pos, cand);
                best.truncate(k);
            }
        }
        let diff = q[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if diff <= 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(c) = near {
            self.search(c, q, k, exclude, best);
        }
        if let Some(c) = far {
            // Equality kept so that ties at the boundary resolve by index.
            if best.len() < k || diff * diff <= best[best.len() - 1].sq_dist {
                self.search(c, q, k, exclude, best);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn finds_line_neighbours() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let t = KdTree::build(pts);
        let nn = t.nearest(&[4.0], 2, Some(4));
        let idx: Vec<usize> = nn.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![3, 5]);
        assert_eq!(nn[0].sq_dist, 1.0);
    }

    #[test]
    fn empty_and_zero_k() {
        let t = KdTree::build(Vec::new());
        assert!(t.nearest(&[0.0], 3, None).is_empty());
        let t = KdTree::build(vec![vec![1.0, 2.0]]);
        assert!(t.nearest(&[0.0, 0.0], 0, None).is_empty());
    }
}
