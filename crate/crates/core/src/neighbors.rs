//! Exact k-nearest-neighbour search.
//!
//! All distances are squared Euclidean and computed by [`sq_dist`], whose
//! summation order is fixed: dimension `i` is accumulated into lane `i % 8`
//! in ascending order and the eight lanes are combined pairwise. Brute force
//! and the ball tree both call it, so they agree bit for bit.
//!
//! Results are the `k` smallest `(distance, index)` pairs in lexicographic
//! order, i.e. ties on distance go to the lower insertion index.

use std::sync::Arc;

use crate::error::{Error, Result};

const LANES: usize = 8;

#[inline]
fn combine(acc: [f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Squared Euclidean distance with the toolkit's canonical summation order.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    for (l, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        let t = x - y;
        acc[l] += t * t;
    }
    combine(acc)
}

/// Dot product with the same lane layout as [`sq_dist`].
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] += x * y;
    }
    combine(acc)
}

/// Row-major matrix of points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("point dimension must be >= 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim * (data.len() / dim + 1),
                got: data.len(),
            });
        }
        Ok(Points { dim, data })
    }

    pub fn with_dim(dim: usize) -> Self {
        Points { dim, data: Vec::new() }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: impl IntoIterator<Item = R>) -> Result<Self> {
        let mut p = Points::with_dim(dim);
        for r in rows {
            p.push(r.as_ref())?;
        }
        Ok(p)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub sq_distances: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Bounded buffer keeping the `k` lexicographically smallest `(dist, idx)`.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].0)
    }

    #[inline]
    fn offer(&mut self, dist: f64, idx: usize) {
        if self.items.len() == self.k {
            let (wd, wi) = self.items[self.k - 1];
            if dist > wd || (dist == wd && idx > wi) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| d < dist || (d == dist && i < idx));
        self.items.insert(pos, (dist, idx));
        self.items.truncate(self.k);
    }

    fn finish(self) -> NeighborSet {
        let (sq_distances, indices) = self.items.into_iter().unzip();
        NeighborSet { indices, sq_distances }
    }
}

fn check_query(points: &Points, query: &[f64], k: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptyBag);
    }
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    if query.len() != points.dim() {
        return Err(Error::DimensionMismatch {
            expected: points.dim(),
            got: query.len(),
        });
    }
    Ok(())
}

/// Brute-force k nearest neighbours; `k` is clamped to the bag size.
pub fn knn(query: &[f64], points: &Points, k: usize) -> Result<NeighborSet> {
    check_query(points, query, k)?;
    let mut top = TopK::new(k.min(points.len()));
    for (i, row) in points.rows().enumerate() {
        top.offer(sq_dist(query, row), i);
    }
    Ok(top.finish())
}

/// Common interface of the exact searchers.
pub trait NeighborSearch: Send + Sync {
    fn points(&self) -> &Points;
    fn search(&self, query: &[f64], k: usize) -> Result<NeighborSet>;

    fn len(&self) -> usize {
        self.points().len()
    }

    fn is_empty(&self) -> bool {
        self.points().is_empty()
    }

    fn dim(&self) -> usize {
        self.points().dim()
    }
}

/// Linear scan over an owned snapshot of the points.
#[derive(Debug, Clone)]
pub struct BruteForce {
    points: Arc<Points>,
}

impl BruteForce {
    pub fn new(points: impl Into<Arc<Points>>) -> Self {
        BruteForce { points: points.into() }
    }
}

impl NeighborSearch for BruteForce {
    fn points(&self) -> &Points {
        &self.points
    }

    fn search(&self, query: &[f64], k: usize) -> Result<NeighborSet> {
        knn(query, &self.points, k)
    }
}

const LEAF_SIZE: usize = 24;
/// Relative slack on the pruning bound. Rounding in the bound is ~1e-15
/// relative; anything this close to the current worst is scanned.
const PRUNE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        center: Vec<f64>,
        radius: f64,
        left: usize,
        right: usize,
    },
}

/// Ball tree over an immutable snapshot of a bag.
///
/// Pruning is conservative, and every surviving candidate is scored with
/// [`sq_dist`] and ranked with the same `(distance, index)` rule as [`knn`],
/// so results are identical to brute force.
#[derive(Debug, Clone)]
pub struct BallTree {
    points: Arc<Points>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    root_center: Vec<f64>,
    root_radius: f64,
}

impl BallTree {
    pub fn build(points: impl Into<Arc<Points>>) -> Result<Self> {
        let points: Arc<Points> = points.into();
        if points.is_empty() {
            return Err(Error::EmptyBag);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let n = order.len();
        Self::build_node(&points, &mut order, 0, n, &mut nodes);
        let (root_center, root_radius) = Self::ball(&points, &order);
        Ok(BallTree {
            points,
            order,
            nodes,
            root_center,
            root_radius,
        })
    }

    fn ball(points: &Points, idx: &[usize]) -> (Vec<f64>, f64) {
        let dim = points.dim();
        let mut center = vec![0.0; dim];
        for &i in idx {
            for (c, x) in center.iter_mut().zip(points.row(i)) {
                *c += x;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        center.iter_mut().for_each(|c| *c *= inv);
        let radius = idx
            .iter()
            .map(|&i| sq_dist(&center, points.row(i)))
            .fold(0.0f64, f64::max)
            .sqrt();
        (center, radius)
    }

    // Returns the node id.
    fn build_node(points: &Points, order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        let slice = &mut order[start..end];
        if slice.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (center, radius) = Self::ball(points, slice);
        let farthest_from = |from: &[f64], idx: &[usize]| -> usize {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (pos, &i) in idx.iter().enumerate() {
                let d = sq_dist(from, points.row(i));
                if d > best.0 {
                    best = (d, pos);
                }
            }
            best.1
        };
        let a = slice[farthest_from(&center, slice)];
        let b = slice[farthest_from(points.row(a), slice)];
        let pa = points.row(a).to_vec();
        let pb = points.row(b).to_vec();
        // Partition: points closer to `a` first; stable on ties.
        let mut left: Vec<usize> = Vec::with_capacity(slice.len());
        let mut right: Vec<usize> = Vec::with_capacity(slice.len());
        for &i in slice.iter() {
            if sq_dist(points.row(i), &pa) <= sq_dist(points.row(i), &pb) {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        if left.is_empty() || right.is_empty() {
            // All points coincide along the split axis.
            nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + left.len();
        slice[..left.len()].copy_from_slice(&left);
        slice[left.len()..].copy_from_slice(&right);
        nodes.push(Node::Leaf { start: 0, end: 0 });
        let l = Self::build_node(points, order, start, mid, nodes);
        let r = Self::build_node(points, order, mid, end, nodes);
        nodes[id] = Node::Split {
            center,
            radius,
            left: l,
            right: r,
        };
        id
    }

    fn node_ball(&self, id: usize) -> Option<(&[f64], f64)> {
        match &self.nodes[id] {
            Node::Split { center, radius, .. } => Some((center, *radius)),
            Node::Leaf { .. } if id == 0 => Some((&self.root_center, self.root_radius)),
            Node::Leaf { .. } => None,
        }
    }

    /// True when no point inside the ball can reach the current worst distance.
    #[inline]
    fn prunable(query: &[f64], center: &[f64], radius: f64, worst: Option<f64>) -> bool {
        let Some(worst) = worst else { return false };
        let to_center = sq_dist(query, center).sqrt();
        let gap = to_center - radius - PRUNE_SLACK * (to_center + radius);
        gap > 0.0 && gap * gap > worst * (1.0 + PRUNE_SLACK)
    }

    fn visit(&self, id: usize, query: &[f64], top: &mut TopK) {
        match &self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    top.offer(sq_dist(query, self.points.row(i)), i);
                }
            }
            Node::Split { left, right, .. } => {
                let (l, r) = (*left, *right);
                let dl = self.child_key(l, query);
                let dr = self.child_key(r, query);
                let (first, second) = if dl <= dr { (l, r) } else { (r, l) };
                for child in [first, second] {
                    if let Some((c, rad)) = self.node_ball(child) {
                        if Self::prunable(query, c, rad, top.worst()) {
                            continue;
                        }
                    }
                    self.visit(child, query, top);
                }
            }
        }
    }

    fn child_key(&self, id: usize, query: &[f64]) -> f64 {
        match self.node_ball(id) {
            Some((c, r)) => sq_dist(query, c).sqrt() - r,
            None => f64::INFINITY,
        }
    }
}

impl NeighborSearch for BallTree {
    fn points(&self) -> &Points {
        &self.points
    }

    fn search(&self, query: &[f64], k: usize) -> Result<NeighborSet> {
        check_query(&self.points, query, k)?;
        let mut top = TopK::new(k.min(self.points.len()));
        self.visit(0, query, &mut top);
        Ok(top.finish())
    }
}

/// Which exact searcher a bag builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexKind {
    #[default]
    BruteForce,
    BallTree,
}

pub fn build_index(points: impl Into<Arc<Points>>, kind: IndexKind) -> Result<Box<dyn NeighborSearch>> {
    let points: Arc<Points> = points.into();
    if points.is_empty() {
        return Err(Error::EmptyBag);
    }
    Ok(match kind {
        IndexKind::BruteForce => Box::new(BruteForce::new(points)),
        IndexKind::BallTree => Box::new(BallTree::build(points)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn line(xs: &[f64]) -> Points {
        Points::from_rows(1, xs.iter().map(|&x| [x])).unwrap()
    }

    #[test]
    fn one_dimensional_example() {
        let ns = knn(&[1.4], &line(&[0.0, 1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(ns.indices, vec![1, 2]);
        assert!((ns.sq_distances[0] - 0.16).abs() < 1e-12);
        assert!((ns.sq_distances[1] - 0.36).abs() < 1e-12);
    }

    #[test]
    fn k_is_clamped() {
        let ns = knn(&[0.0], &line(&[0.0, 1.0, 2.0, 3.0]), 10).unwrap();
        assert_eq!(ns.len(), 4);
        assert_eq!(ns.indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let ns = knn(&[0.0], &line(&[5.0, 1.0, -1.0, 1.0]), 3).unwrap();
        assert_eq!(ns.indices, vec![1, 2, 3]);
    }

    #[test]
    fn empty_bag_and_bad_k() {
        assert!(matches!(knn(&[0.0], &Points::with_dim(1), 1), Err(Error::EmptyBag)));
        assert!(knn(&[0.0], &line(&[1.0]), 0).is_err());
        assert!(matches!(
            knn(&[0.0, 1.0], &line(&[1.0]), 1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(BallTree::build(Points::with_dim(3)).is_err());
    }

    #[test]
    fn single_point_bag() {
        let tree = BallTree::build(line(&[2.5])).unwrap();
        for k in [1, 3, 50] {
            let ns = tree.search(&[-4.0], k).unwrap();
            assert_eq!(ns.indices, vec![0]);
            assert_eq!(ns.sq_distances, vec![42.25]);
        }
    }

    #[test]
    fn query_on_a_bag_point_has_zero_distance() {
        let mut rng = crate::seed::rng(3);
        let pts = Points::from_rows(5, (0..200).map(|_| (0..5).map(|_| rng.random::<f64>()).collect::<Vec<_>>())).unwrap();
        let tree = BallTree::build(pts.clone()).unwrap();
        let ns = tree.search(pts.row(17), 3).unwrap();
        assert_eq!(ns.indices[0], 17);
        assert_eq!(ns.sq_distances[0], 0.0);
    }

    #[test]
    fn sq_dist_matches_naive_sum() {
        let mut rng = crate::seed::rng(9);
        for dim in [1, 7, 8, 9, 100] {
            let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            assert!((sq_dist(&a, &b) - naive).abs() <= 1e-12 * naive.max(1.0));
            let naive_dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive_dot).abs() <= 1e-12);
        }
    }

    #[test]
    fn tree_matches_brute_force_on_clustered_data() {
        let mut rng = crate::seed::rng(11);
        let mut rows = Vec::new();
        for i in 0..1500 {
            let c = (i % 3) as f64 * 10.0;
            rows.push((0..6).map(|_| c + rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        }
        // exact duplicates to exercise the tie rule
        for i in 0..50 {
            rows.push(rows[i * 7].clone());
        }
        let pts = Points::from_rows(6, &rows).unwrap();
        let tree = BallTree::build(pts.clone()).unwrap();
        for q in 0..200 {
            let query: Vec<f64> = if q % 4 == 0 {
                rows[q].clone()
            } else {
                (0..6).map(|_| rng.random_range(-2.0..22.0)).collect()
            };
            for k in [1, 5, 9] {
                assert_eq!(tree.search(&query, k).unwrap(), knn(&query, &pts, k).unwrap());
            }
        }
    }
}
