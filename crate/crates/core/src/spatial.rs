//! Neighbour search and point-set utilities shared by registration and
//! reconstruction: a static kd-tree, voxel-grid downsampling, PCA normals and
//! radius outlier removal.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::geometry::{PointCloud, Vec3};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static 3-d tree over a point set. Query results are deterministic: ties
/// in distance are broken by the original point index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    index: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build(points, &mut perm, 0, points.len(), &mut nodes);
        }
        KdTree {
            points: perm.iter().map(|&i| points[i]).collect(),
            index: perm,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Closest point: `(original index, squared distance)`.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.nearest_within(q, f64::INFINITY)
    }

    /// Closest point with squared distance strictly below `max_dist`².
    pub fn nearest_within(&self, q: &Vec3, max_dist: f64) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, max_dist * max_dist);
        self.nearest_rec(0, q, &mut best);
        (best.0 != usize::MAX).then(|| (self.index[best.0], best.1))
    }

    fn nearest_rec(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let d = (self.points[slot] - q).norm_squared();
                    if d < best.1 || (d == best.1 && best.0 != usize::MAX && self.index[slot] < self.index[best.0]) {
                        *best = (slot, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.1 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by distance: `(original index, squared distance)`.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.knn_rec(0, q, k, &mut heap);
        }
        heap.into_iter().map(|(d, slot)| (self.index[slot], d)).collect()
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, heap: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let d = (self.points[slot] - q).norm_squared();
                    let key = (d, self.index[slot]);
                    if heap.len() == k {
                        let last = heap[k - 1];
                        if key >= (last.0, self.index[last.1]) {
                            continue;
                        }
                        heap.pop();
                    }
                    let pos = heap.partition_point(|&(hd, hs)| (hd, self.index[hs]) < key);
                    heap.insert(pos, (d, slot));
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap[k - 1].0 {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }

    /// Original indices of all points within `radius` (inclusive), unordered.
    pub fn within(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_rec(0, q, radius * radius, &mut |slot| out.push(slot));
        }
        out.into_iter().map(|s| self.index[s]).collect()
    }

    /// Number of points within `radius`, stopping early once `cap` is reached.
    pub fn count_within(&self, q: &Vec3, radius: f64, cap: usize) -> usize {
        let mut n = 0;
        if !self.nodes.is_empty() {
            self.count_rec(0, q, radius * radius, cap, &mut n);
        }
        n
    }

    fn within_rec(&self, node: usize, q: &Vec3, r2: f64, f: &mut impl FnMut(usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    if (self.points[slot] - q).norm_squared() <= r2 {
                        f(slot);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.within_rec(near, q, r2, f);
                if diff * diff <= r2 {
                    self.within_rec(far, q, r2, f);
                }
            }
        }
    }

    fn count_rec(&self, node: usize, q: &Vec3, r2: f64, cap: usize, n: &mut usize) {
        if *n >= cap {
            return;
        }
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    if (self.points[slot] - q).norm_squared() <= r2 {
                        *n += 1;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.count_rec(near, q, r2, cap, n);
                if diff * diff <= r2 {
                    self.count_rec(far, q, r2, cap, n);
                }
            }
        }
    }
}

fn build(points: &[Vec3], perm: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut perm[start..end];
    let (mut lo, mut hi) = (points[slice[0]], points[slice[0]]);
    for &i in slice.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    if hi[axis] - lo[axis] == 0.0 {
        // all points coincide
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build(points, perm, start, start + mid, nodes);
    let right = build(points, perm, start + mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}

/// Integer voxel coordinate of `p` for cell size `voxel`.
pub fn voxel_key(p: &Vec3, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// One point per occupied voxel: centroid position, mean color and mean
/// (renormalised) normal. Output order follows first occupancy.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(cloud.len() / 2);
    let mut sums: Vec<(Vec3, Vec3, Vec3, usize)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let slot = *slots.entry(voxel_key(p, voxel)).or_insert_with(|| {
            sums.push((Vec3::zeros(), Vec3::zeros(), Vec3::zeros(), 0));
            sums.len() - 1
        });
        let s = &mut sums[slot];
        s.0 += p;
        if let Some(c) = &cloud.colors {
            s.1 += c[i];
        }
        if let Some(n) = &cloud.normals {
            s.2 += n[i];
        }
        s.3 += 1;
    }
    let points = sums.iter().map(|s| s.0 / s.3 as f64).collect();
    let colors = cloud
        .colors
        .as_ref()
        .map(|_| sums.iter().map(|s| s.1 / s.3 as f64).collect());
    let normals = cloud.normals.as_ref().map(|_| {
        sums.iter()
            .map(|s| {
                let n = s.2.norm();
                if n > 1e-12 {
                    s.2 / n
                } else {
                    Vec3::z()
                }
            })
            .collect()
    });
    PointCloud {
        points,
        colors,
        normals,
        frame: cloud.frame,
    }
}

/// Covariance eigen-analysis of a neighbourhood. Returns the unit normal
/// (eigenvector of the smallest eigenvalue) and the ascending eigenvalues.
pub fn pca_normal<'a>(neighbours: impl Iterator<Item = &'a Vec3> + Clone) -> Option<(Vec3, [f64; 3])> {
    let mut n = 0usize;
    let mut mean = Vec3::zeros();
    for p in neighbours.clone() {
        mean += p;
        n += 1;
    }
    if n < 3 {
        return None;
    }
    mean /= n as f64;
    let mut cov = Matrix3::zeros();
    for p in neighbours {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let norm = normal.norm();
    if !(norm > 0.0) {
        return None;
    }
    Some((
        normal / norm,
        [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]],
    ))
}

/// Unoriented PCA normals over the `k` nearest neighbours of each point.
/// Points whose neighbourhood is degenerate get `+z`.
pub fn knn_normals(points: &[Vec3], tree: &KdTree, k: usize) -> Vec<Vec3> {
    points
        .iter()
        .map(|p| {
            let nn = tree.knn(p, k);
            pca_normal(nn.iter().map(|&(i, _)| &points[i]))
                .map(|(n, _)| n)
                .unwrap_or_else(Vec3::z)
        })
        .collect()
}

/// Indices of points with at least `min_neighbours` other points within `radius`.
pub fn radius_inliers(points: &[Vec3], radius: f64, min_neighbours: usize) -> Vec<usize> {
    let tree = KdTree::new(points);
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| tree.count_within(p, radius, min_neighbours + 1) > min_neighbours)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // a plane of equal-z points with repeated coordinates
        let mut pts: Vec<Vec3> = (0..400)
            .map(|_| Vec3::new(rng.random_range(0..20) as f64 * 0.01, rng.random_range(0..20) as f64 * 0.01, 1.0))
            .collect();
        pts.extend((0..200).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())));
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random_range(0.5..1.5));
            assert_eq!(tree.knn(&q, 15), brute_knn(&pts, &q, 15));
            let (i, d) = tree.nearest(&q).unwrap();
            assert_eq!((i, d), brute_knn(&pts, &q, 1)[0]);
            let mut w = tree.within(&q, 0.2);
            w.sort();
            let brute: Vec<usize> = (0..pts.len()).filter(|&i| (pts[i] - q).norm() <= 0.2).collect();
            assert_eq!(w, brute);
        }
    }

    #[test]
    fn all_identical_points() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0); 100];
        let tree = KdTree::new(&pts);
        let nn = tree.knn(&Vec3::zeros(), 5);
        assert_eq!(nn.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
    }

    #[test]
    fn nearest_within_respects_radius() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0)];
        let tree = KdTree::new(&pts);
        assert!(tree.nearest_within(&Vec3::zeros(), 0.5).is_none());
        assert_eq!(tree.nearest_within(&Vec3::zeros(), 1.5), Some((0, 1.0)));
    }

    #[test]
    fn voxel_downsample_counts() {
        let pts: Vec<Vec3> = (0..10).flat_map(|i| (0..10).map(move |j| Vec3::new(i as f64 * 0.1 + 0.05, j as f64 * 0.1 + 0.05, 0.5))).collect();
        let cloud = PointCloud::new(pts.clone());
        assert_eq!(voxel_downsample(&cloud, 0.1).len(), 100);
        assert_eq!(voxel_downsample(&cloud, 0.2).len(), 25);
        let mut doubled = cloud.clone();
        doubled.append(&cloud);
        assert_eq!(voxel_downsample(&doubled, 0.1).len(), 100);
    }

    #[test]
    fn plane_normals() {
        let pts: Vec<Vec3> = (0..20).flat_map(|i| (0..20).map(move |j| Vec3::new(i as f64 * 0.01, j as f64 * 0.01, 1.0))).collect();
        let tree = KdTree::new(&pts);
        for n in knn_normals(&pts, &tree, 10) {
            assert!((n.z.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn outlier_removal() {
        let mut pts: Vec<Vec3> = (0..10).flat_map(|i| (0..10).map(move |j| Vec3::new(i as f64 * 0.01, j as f64 * 0.01, 0.0))).collect();
        pts.push(Vec3::new(5.0, 5.0, 5.0));
        let keep = radius_inliers(&pts, 0.015, 2);
        assert_eq!(keep.len(), 100);
        assert!(!keep.contains(&100));
    }

    proptest! {
        #[test]
        fn knn_property(seed in 0u64..1000, k in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..150).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let tree = KdTree::new(&pts);
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            prop_assert_eq!(tree.knn(&q, k), brute_knn(&pts, &q, k));
        }
    }
}
