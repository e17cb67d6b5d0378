//! Exact k-nearest-neighbour search over anchor positions.
//!
//! Neighbours are ordered by squared Euclidean distance, ties broken by the
//! smaller anchor index, and a point is never its own neighbour.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::scalar::Real;

pub const DEFAULT_NEIGHBORS: usize = 4;
const LEAF_SIZE: usize = 8;

#[derive(Debug)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: T, left: Box<Node<T>>, right: Box<Node<T>> },
}

/// Static kd-tree over a borrowed point set.
#[derive(Debug)]
pub struct KdTree<'a, T> {
    points: &'a [[T; 3]],
    order: Vec<usize>,
    root: Option<Node<T>>,
}

#[inline]
fn dist2<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn closer<T: Real>(a: (T, usize), b: (T, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl<'a, T: Real> KdTree<'a, T> {
    pub fn new(points: &'a [[T; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = (!points.is_empty()).then(|| Self::build(points, &mut order, 0));
        Self { points, order, root }
    }

    fn build(points: &[[T; 3]], order: &mut [usize], start: usize) -> Node<T> {
        let n = order.len();
        if n <= LEAF_SIZE {
            return Node::Leaf { start, end: start + n };
        }
        let mut lo = points[order[0]];
        let mut hi = lo;
        for &i in order.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap_or(Ordering::Equal).then(b.cmp(&a)))
            .unwrap_or(0);
        if hi[axis] == lo[axis] {
            // all points coincide
            return Node::Leaf { start, end: start + n };
        }
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let value = points[order[mid]][axis];
        let (l, r) = order.split_at_mut(mid);
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build(points, l, start)),
            right: Box::new(Self::build(points, r, start + mid)),
        }
    }

    /// The `k` nearest points to `points[query]`, excluding `query` itself.
    pub fn neighbors_of(&self, query: usize, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len().saturating_sub(1));
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        if let Some(root) = &self.root {
            self.search(root, &self.points[query], query, k, &mut best);
        }
        best.into_iter().map(|e| e.1).collect()
    }

    fn search(&self, node: &Node<T>, q: &[T; 3], skip: usize, k: usize, best: &mut Vec<(T, usize)>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if i == skip {
                        continue;
                    }
                    let cand = (dist2(q, &self.points[i]), i);
                    if best.len() == k && !closer(cand, best[k - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|&e| closer(e, cand));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let d = q[*axis] - *value;
                let (near, far) = if d < T::zero() { (left, right) } else { (right, left) };
                self.search(near, q, skip, k, best);
                // ties can sit across the plane, so visit on equality too
                if best.len() < k || d * d <= best[k - 1].0 {
                    self.search(far, q, skip, k, best);
                }
            }
        }
    }
}

/// Neighbour lists for every anchor, `min(k, N - 1)` entries each.
pub fn knn_indices<T: Real>(positions: &[[T; 3]], k: usize) -> Vec<Vec<usize>> {
    let tree = KdTree::new(positions);
    (0..positions.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| tree.neighbors_of(i, k))
        .collect()
}

/// Quadratic reference used by tests and small inputs.
pub fn knn_brute_force<T: Real>(positions: &[[T; 3]], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(positions.len().saturating_sub(1));
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut all: Vec<(T, usize)> = positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            all.truncate(k);
            all.into_iter().map(|e| e.1).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn line_example() {
        let pts: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let nn = knn_indices(&pts, 2);
        assert_eq!(nn[0], vec![1, 2]);
        assert_eq!(nn[1], vec![0, 2]);
        assert_eq!(nn[3], vec![2, 1]);
    }

    #[test]
    fn small_clouds_return_all_others() {
        let pts = cloud(1, 3);
        let nn = knn_indices(&pts, 4);
        assert!(nn.iter().all(|v| v.len() == 2));
        assert_eq!(knn_indices(&pts[..1], 4), vec![Vec::<usize>::new()]);
        assert!(knn_indices::<f64>(&[], 4).is_empty());
    }

    #[test]
    fn ties_and_duplicates_break_by_index() {
        let mut pts = vec![[0.0f64; 3]; 20];
        pts.push([1.0, 0.0, 0.0]);
        let nn = knn_indices(&pts, 4);
        assert_eq!(nn[0], vec![1, 2, 3, 4]);
        assert_eq!(nn[7], vec![0, 1, 2, 3]);
        assert_eq!(nn[20], vec![0, 1, 2, 3]);
        // symmetric lattice: equal distances everywhere
        let grid: Vec<[f64; 3]> = (0..125)
            .map(|i| [(i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64])
            .collect();
        assert_eq!(knn_indices(&grid, 8), knn_brute_force(&grid, 8));
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        for seed in 0..4 {
            let pts = cloud(seed, 700);
            for k in [1, 4, 8] {
                assert_eq!(knn_indices(&pts, k), knn_brute_force(&pts, k), "seed {seed} k {k}");
            }
        }
        let pts32: Vec<[f32; 3]> = cloud(9, 300).iter().map(|p| p.map(|v| v as f32)).collect();
        assert_eq!(knn_indices(&pts32, 4), knn_brute_force(&pts32, 4));
    }
}
