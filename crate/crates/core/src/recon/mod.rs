//! Oriented normals, Poisson surface reconstruction on a uniform grid, and
//! mesh topology helpers.

mod mc;
mod mc_table;
pub mod solver;
pub mod topology;

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::geometry::{PointCloud, RigidTransform, Vec3};
use crate::spatial::{pca_normal, KdTree};

pub use mc::marching_cubes;
pub(crate) use mc::{polygonize_cell, CORNERS as MC_CORNERS};
pub use solver::{KrylovMethod, SolveStats};
pub use topology::{compact, cull_small_components, euler_characteristic, is_watertight, triangle_components};

#[derive(Debug, thiserror::Error)]
pub enum ReconError {
    #[error("need at least {needed} points for normal estimation, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("normal estimation requires k >= 3, got {0}")]
    BadNeighbourCount(usize),
    #[error("no camera centre for source id {0}")]
    UnknownSource(u32),
    #[error("oriented cloud invalid: {0}")]
    InvalidCloud(String),
    #[error("resolution {0} outside [32, 512]")]
    Resolution(usize),
    #[error("solver did not converge within {iterations} iterations (relative residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },
    #[error("reconstruction produced an empty iso-surface")]
    EmptySurface,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn validate(&self) -> Result<(), ReconError> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(ReconError::InvalidCloud("triangle index out of range".into()));
        }
        Ok(())
    }

    fn corners(&self, t: &[u32; 3]) -> [Vec3; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    /// Sum of triangle areas. Each triangle is evaluated from its
    /// lexicographically smallest corner and the terms are summed in sorted
    /// order, so the result does not depend on vertex indexing or triangle
    /// order.
    pub fn surface_area(&self) -> f64 {
        let lex = |p: &Vec3, q: &Vec3| p.iter().partial_cmp(q.iter()).unwrap_or(std::cmp::Ordering::Equal);
        let mut areas: Vec<f64> = self
            .triangles
            .iter()
            .map(|t| {
                let mut c = self.corners(t);
                let first = (0..3).min_by(|&i, &j| lex(&c[i], &c[j])).expect("three corners");
                c.rotate_left(first);
                let [a, b, c] = c;
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .collect();
        areas.sort_by(f64::total_cmp);
        areas.iter().sum()
    }

    /// Divergence-theorem volume; positive for outward-wound closed meshes.
    pub fn signed_volume(&self) -> f64 {
        // shifting to a local origin keeps the per-triangle terms small
        let origin = self.vertices.first().copied().unwrap_or_else(Vec3::zeros);
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t).map(|p| p - origin);
                a.dot(&b.cross(&c))
            })
            .sum::<f64>()
            / 6.0
    }

    pub fn flipped(&self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> TriangleMesh {
        TriangleMesh { vertices: self.vertices.iter().map(|p| t.apply_point(p)).collect(), triangles: self.triangles.clone() }
    }

    pub fn scaled(&self, s: f64) -> TriangleMesh {
        TriangleMesh { vertices: self.vertices.iter().map(|p| p * s).collect(), triangles: self.triangles.clone() }
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }
}

/// Point cloud with unit normals and the camera each point came from.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointCloud {
    pub cloud: PointCloud,
    pub sources: Vec<u32>,
}

impl OrientedPointCloud {
    /// Wraps a cloud that already carries normals.
    pub fn new(cloud: PointCloud, sources: Vec<u32>) -> Result<Self, ReconError> {
        let normals = cloud.normals.as_ref().ok_or_else(|| ReconError::InvalidCloud("normals missing".into()))?;
        if normals.len() != cloud.points.len() || sources.len() != cloud.points.len() {
            return Err(ReconError::InvalidCloud("normals/sources length differs from points".into()));
        }
        if normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(ReconError::InvalidCloud("normal not unit length".into()));
        }
        Ok(OrientedPointCloud { cloud, sources })
    }

    pub fn normals(&self) -> &[Vec3] {
        self.cloud.normals.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// PCA normals over the `k` nearest neighbours, each flipped to face the
/// centre of the camera its point came from.
pub fn estimate_normals(
    cloud: &PointCloud,
    sources: &[u32],
    k: usize,
    camera_centers: &BTreeMap<u32, Vec3>,
) -> Result<OrientedPointCloud, ReconError> {
    if k < 3 {
        return Err(ReconError::BadNeighbourCount(k));
    }
    if cloud.len() < k {
        return Err(ReconError::TooFewPoints { needed: k, got: cloud.len() });
    }
    if sources.len() != cloud.len() {
        return Err(ReconError::InvalidCloud("one source id per point required".into()));
    }
    let tree = KdTree::new(&cloud.points);
    let mut normals = Vec::with_capacity(cloud.len());
    for (p, src) in cloud.points.iter().zip(sources) {
        let center = camera_centers.get(src).ok_or(ReconError::UnknownSource(*src))?;
        let nbrs = tree.knn(p, k);
        let pts: Vec<Vec3> = nbrs.iter().map(|&(i, _)| cloud.points[i]).collect();
        let (mut n, _) = pca_normal(pts.iter()).unwrap_or((center - p, [0.0; 3]));
        if n.norm() == 0.0 {
            n = Vec3::z();
        }
        n = n.normalize();
        if n.dot(&(center - p)) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    let oriented = cloud.clone().with_normals(normals);
    OrientedPointCloud::new(oriented, sources.to_vec())
}

/// Scalar field on a uniform node grid; node `(i, j, k)` sits at
/// `origin + spacing·(i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(dims: [usize; 3], origin: Vec3, spacing: f64) -> Self {
        assert!(spacing > 0.0);
        ScalarGrid { dims, origin, spacing, values: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    /// Lower node and fractional offsets of `p`, clamped into the grid.
    fn locate(&self, p: &Vec3) -> ([usize; 3], [f64; 3]) {
        let g = (p - self.origin) / self.spacing;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 2) as f64;
            let x = g[a].clamp(0.0, hi + 1.0);
            let b = x.floor().min(hi);
            base[a] = b as usize;
            frac[a] = x - b;
        }
        (base, frac)
    }

    /// Trilinear weights of the 8 nodes around `p`.
    fn trilinear(&self, p: &Vec3) -> [(usize, f64); 8] {
        let ([i, j, k], [fx, fy, fz]) = self.locate(p);
        let mut out = [(0, 0.0); 8];
        for (c, off) in mc::CORNERS.iter().enumerate() {
            let w = if off[0] == 1 { fx } else { 1.0 - fx }
                * if off[1] == 1 { fy } else { 1.0 - fy }
                * if off[2] == 1 { fz } else { 1.0 - fz };
            out[c] = (self.index(i + off[0], j + off[1], k + off[2]), w);
        }
        out
    }

    pub fn sample(&self, p: &Vec3) -> f64 {
        self.trilinear(p).iter().map(|&(idx, w)| w * self.values[idx]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    /// Cells along the longest axis of the padded grid.
    pub resolution: usize,
    /// Relative residual target of the linear solve.
    pub tol: f64,
    pub method: KrylovMethod,
    /// Neighbours used for the per-sample area estimate.
    pub area_k: usize,
    /// Components below this share of all triangles are dropped.
    pub min_component_fraction: f64,
}

impl Default for PoissonParams {
    fn default() -> Self {
        PoissonParams { resolution: 128, tol: 1e-6, method: KrylovMethod::default(), area_k: 8, min_component_fraction: 0.01 }
    }
}

impl PoissonParams {
    pub fn with_resolution(resolution: usize) -> Self {
        PoissonParams { resolution, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonOutput {
    pub mesh: TriangleMesh,
    pub chi: ScalarGrid,
    pub iso: f64,
    pub solve: SolveStats,
}

/// Grid covering `lo..hi` with at least three cells of padding.
fn padded_grid(lo: &Vec3, hi: &Vec3, resolution: usize) -> ScalarGrid {
    let pad = (resolution / 20).max(4);
    let extent = (hi - lo).max().max(1e-6);
    let spacing = extent / (resolution - 2 * pad) as f64;
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let cells = ((hi[a] - lo[a]) / spacing).ceil() as usize + 2 * pad;
        dims[a] = (cells + 1).max(9);
    }
    let centre = (lo + hi) / 2.0;
    let half = Vec3::new(dims[0] as f64 - 1.0, dims[1] as f64 - 1.0, dims[2] as f64 - 1.0) * spacing / 2.0;
    ScalarGrid::new(dims, centre - half, spacing)
}

/// Per-sample area `π d_k² / k` from the distance to the k-th neighbour.
fn sample_areas(points: &[Vec3], k: usize) -> Vec<f64> {
    let k = k.min(points.len().saturating_sub(1)).max(1);
    let tree = KdTree::new(points);
    points
        .iter()
        .map(|p| {
            let nn = tree.knn(p, k + 1);
            let d2 = nn.last().map_or(0.0, |&(_, d2)| d2);
            std::f64::consts::PI * d2 / k as f64
        })
        .collect()
}

fn gaussian_blur_axis(values: &mut [f64], dims: [usize; 3], axis: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis] as isize;
    let src = values.to_vec();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx = i + dims[0] * (j + dims[1] * k);
                let pos = [i, j, k][axis] as isize;
                let mut acc = 0.0;
                for (o, w) in kernel.iter().enumerate() {
                    let q = pos + o as isize - r;
                    if q >= 0 && q < n {
                        let qi = (idx as isize + (q - pos) * stride as isize) as usize;
                        acc += w * src[qi];
                    }
                }
                values[idx] = acc;
            }
        }
    }
}

/// Indicator-function reconstruction: splat inward normals, blur, solve
/// `Δχ = ∇·V` with zero boundary values, and extract the level set at the
/// mean of χ over the samples.
pub fn poisson_reconstruct(cloud: &OrientedPointCloud, params: &PoissonParams) -> Result<PoissonOutput, ReconError> {
    if cloud.is_empty() {
        return Err(ReconError::InvalidCloud("empty cloud".into()));
    }
    if !(32..=512).contains(&params.resolution) {
        return Err(ReconError::Resolution(params.resolution));
    }
    let points = &cloud.cloud.points;
    let normals = cloud.normals();
    let (lo, hi) = cloud.cloud.bounds().expect("nonempty");
    let mut chi = padded_grid(&lo, &hi, params.resolution);
    let dims = chi.dims;
    let n = chi.values.len();
    let h = chi.spacing;

    let areas = sample_areas(points, params.area_k);
    let mut field = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let cell_volume = h * h * h;
    for ((p, nrm), a) in points.iter().zip(normals).zip(&areas) {
        let inward = -nrm * (a / cell_volume);
        for (idx, w) in chi.trilinear(p) {
            for c in 0..3 {
                field[c][idx] += w * inward[c];
            }
        }
    }
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-3..=3).map(|x: i32| (-(x * x) as f64 / 2.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|w| w / s).collect()
    };
    for comp in field.iter_mut() {
        for axis in 0..3 {
            gaussian_blur_axis(comp, dims, axis, &kernel);
        }
    }

    // b = -h² ∇·V, for the scaled operator A = -h² Δ
    let op = solver::GridLaplacian { dims };
    let mut b = vec![0.0; n];
    let (sx, sy, sz) = (1, dims[0], dims[0] * dims[1]);
    for k in 1..dims[2] - 1 {
        for j in 1..dims[1] - 1 {
            for i in 1..dims[0] - 1 {
                let c = chi.index(i, j, k);
                let div = (field[0][c + sx] - field[0][c - sx] + field[1][c + sy] - field[1][c - sy] + field[2][c + sz]
                    - field[2][c - sz])
                    / (2.0 * h);
                b[c] = -h * h * div;
            }
        }
    }
    drop(field);

    let max_iter = 10 * params.resolution;
    let stats = solver::solve(&op, &b, &mut chi.values, params.tol, max_iter, params.method);
    debug!("poisson solve: {} iterations, residual {:.3e}", stats.iterations, stats.final_residual());
    if !stats.converged {
        return Err(ReconError::SolverDiverged { iterations: stats.iterations, residual: stats.final_residual() });
    }

    let iso = points.iter().map(|p| chi.sample(p)).sum::<f64>() / points.len() as f64;
    let raw = marching_cubes(&chi, iso);
    if raw.triangles.is_empty() {
        return Err(ReconError::EmptySurface);
    }
    let mut mesh = cull_small_components(&raw, params.min_component_fraction);
    if mesh.signed_volume() < 0.0 {
        mesh = mesh.flipped();
    }
    if mesh.triangles.is_empty() {
        return Err(ReconError::EmptySurface);
    }
    Ok(PoissonOutput { mesh, chi, iso, solve: stats })
}
