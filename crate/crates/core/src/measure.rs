//! Mesh metrology and reference oracles.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::recon::{is_watertight, polygonize_cell, TriangleMesh};
use crate::sim::ScenePrimitive;

#[derive(Debug, thiserror::Error)]
pub enum MeasureError {
    #[error("volume requires a watertight mesh ({boundary_edges} boundary edges)")]
    NotWatertight { boundary_edges: usize },
    #[error("empty mesh")]
    EmptyMesh,
    #[error("oracle did not converge: {quantity} changed by {change:.4}% on halving spacing {spacing} m")]
    OracleUnreliable { quantity: &'static str, change: f64, spacing: f64 },
    #[error("oracle needs at least one target primitive")]
    NoTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshMeasurements {
    pub surface_area: f64,
    pub volume: f64,
}

pub fn surface_area(mesh: &TriangleMesh) -> f64 {
    mesh.surface_area()
}

/// Divergence-theorem volume; refuses meshes that are not closed.
pub fn volume(mesh: &TriangleMesh) -> Result<f64, MeasureError> {
    let (closed, boundary_edges) = is_watertight(mesh);
    if !closed {
        return Err(MeasureError::NotWatertight { boundary_edges });
    }
    Ok(mesh.signed_volume().abs())
}

pub fn measure(mesh: &TriangleMesh) -> Result<MeshMeasurements, MeasureError> {
    if mesh.triangles.is_empty() {
        return Err(MeasureError::EmptyMesh);
    }
    Ok(MeshMeasurements { surface_area: surface_area(mesh), volume: volume(mesh)? })
}

pub fn box_reference(dims: [f64; 3]) -> MeshMeasurements {
    let [a, b, c] = dims;
    MeshMeasurements { surface_area: 2.0 * (a * b + b * c + c * a), volume: a * b * c }
}

pub fn cylinder_reference(radius: f64, height: f64) -> MeshMeasurements {
    use std::f64::consts::PI;
    MeshMeasurements { surface_area: 2.0 * PI * radius * (height + radius), volume: PI * radius * radius * height }
}

/// `100·|estimate − reference| / reference`
pub fn percent_error(estimate: f64, reference: f64) -> f64 {
    100.0 * (estimate - reference).abs() / reference
}

/// One streaming voxelization of a union of primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub spacing: f64,
    /// Area of the marching-cubes surface.
    pub area: f64,
    /// Divergence volume of the marching-cubes surface.
    pub volume: f64,
    /// Inside node count × spacing³.
    pub voxel_volume: f64,
    /// Cells straddling the surface.
    pub surface_cells: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub measurements: MeshMeasurements,
    /// `None` when a closed form was used.
    pub coarse: Option<OracleEstimate>,
    pub fine: Option<OracleEstimate>,
}

const BLOCK: usize = 16;

/// Union implicit `min_i f_i` over primitives whose bounds reach the query
/// region; every `f_i` is 1-Lipschitz, hence so is the union.
struct Union<'a> {
    prims: Vec<(&'a ScenePrimitive, Vec3, Vec3)>,
}

impl<'a> Union<'a> {
    fn new(prims: &'a [ScenePrimitive]) -> Self {
        Union {
            prims: prims
                .iter()
                .map(|p| {
                    let (lo, hi) = p.world_bounds();
                    (p, lo, hi)
                })
                .collect(),
        }
    }

    fn active(&self, lo: &Vec3, hi: &Vec3) -> Vec<&'a ScenePrimitive> {
        self.prims
            .iter()
            .filter(|(_, plo, phi)| (0..3).all(|a| plo[a] <= hi[a] && phi[a] >= lo[a]))
            .map(|(p, _, _)| *p)
            .collect()
    }
}

fn union_value(active: &[&ScenePrimitive], p: &Vec3) -> f64 {
    active.iter().map(|q| q.implicit_world(p)).fold(f64::INFINITY, f64::min)
}

/// Streams marching cubes over `BLOCK³` cell blocks, skipping blocks that
/// provably contain no surface, and accumulates area and volume from the
/// triangle soup without storing a mesh.
pub fn composite_oracle(prims: &[ScenePrimitive], spacing: f64) -> Result<OracleEstimate, MeasureError> {
    if prims.is_empty() {
        return Err(MeasureError::NoTargets);
    }
    let union = Union::new(prims);
    let (mut lo, mut hi) = (union.prims[0].1, union.prims[0].2);
    for (_, plo, phi) in &union.prims {
        lo = lo.inf(plo);
        hi = hi.sup(phi);
    }
    let pad = 2.0 * spacing;
    let origin = lo - Vec3::repeat(pad);
    let cells: [usize; 3] = [0, 1, 2].map(|a| ((hi[a] - lo[a] + 2.0 * pad) / spacing).ceil() as usize);
    let blocks: [usize; 3] = cells.map(|c| c.div_ceil(BLOCK));
    let centre = (lo + hi) / 2.0;
    let h3 = spacing.powi(3);

    let mut area = 0.0;
    let mut volume = 0.0;
    let mut inside_nodes: u64 = 0;
    let mut surface_cells: u64 = 0;
    let node = |i: usize, j: usize, k: usize| origin + Vec3::new(i as f64, j as f64, k as f64) * spacing;
    let mut values = vec![0.0; (BLOCK + 1).pow(3)];
    for bk in 0..blocks[2] {
        for bj in 0..blocks[1] {
            for bi in 0..blocks[0] {
                let start = [bi * BLOCK, bj * BLOCK, bk * BLOCK];
                let n = [0, 1, 2].map(|a| (cells[a] - start[a]).min(BLOCK));
                let blo = node(start[0], start[1], start[2]);
                let bhi = node(start[0] + n[0], start[1] + n[1], start[2] + n[2]);
                let active = union.active(&blo, &bhi);
                if active.is_empty() {
                    continue;
                }
                let half_diag = (bhi - blo).norm() / 2.0;
                let mid = (blo + bhi) / 2.0;
                let fm = union_value(&active, &mid);
                // nodes owned by this block: half-open ranges, closed at the grid end
                let owned = [0, 1, 2].map(|a| if start[a] + n[a] == cells[a] { n[a] + 1 } else { n[a] });
                if fm < -half_diag {
                    inside_nodes += (owned[0] * owned[1] * owned[2]) as u64;
                    continue;
                }
                if fm > half_diag {
                    continue;
                }
                let stride = [1, n[0] + 1, (n[0] + 1) * (n[1] + 1)];
                for k in 0..=n[2] {
                    for j in 0..=n[1] {
                        for i in 0..=n[0] {
                            // positive inside so the soup winds outward
                            let v = -union_value(&active, &node(start[0] + i, start[1] + j, start[2] + k));
                            values[i + stride[1] * j + stride[2] * k] = v;
                            if v > 0.0 && i < owned[0] && j < owned[1] && k < owned[2] {
                                inside_nodes += 1;
                            }
                        }
                    }
                }
                let mut cv = [0.0; 8];
                let mut cp = [Vec3::zeros(); 8];
                for k in 0..n[2] {
                    for j in 0..n[1] {
                        for i in 0..n[0] {
                            let mut any_in = false;
                            let mut any_out = false;
                            for (c, off) in crate::recon::MC_CORNERS.iter().enumerate() {
                                let v = values[(i + off[0]) + stride[1] * (j + off[1]) + stride[2] * (k + off[2])];
                                cv[c] = v;
                                any_in |= v >= 0.0;
                                any_out |= v < 0.0;
                                cp[c] = node(start[0] + i + off[0], start[1] + j + off[1], start[2] + k + off[2]) - centre;
                            }
                            if !(any_in && any_out) {
                                continue;
                            }
                            surface_cells += 1;
                            polygonize_cell(&cv, &cp, 0.0, |[a, b, c]| {
                                area += 0.5 * (b - a).cross(&(c - a)).norm();
                                volume += a.dot(&b.cross(&c)) / 6.0;
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(OracleEstimate { spacing, area, volume: volume.abs(), voxel_volume: inside_nodes as f64 * h3, surface_cells })
}

/// Relative change (percent) tolerated between spacing `h` and `h/2`.
pub const ORACLE_CONVERGENCE_PCT: f64 = 0.1;

/// Closed form for a single box or cylinder; otherwise the composite oracle
/// at `spacing` and `spacing/2`, which must agree within 0.1%.
pub fn oracle_measurements(prims: &[ScenePrimitive], spacing: f64) -> Result<OracleReport, MeasureError> {
    if let [single] = prims {
        if let (Some(surface_area), Some(volume)) = (single.shape.analytic_area(), single.shape.analytic_volume()) {
            return Ok(OracleReport { measurements: MeshMeasurements { surface_area, volume }, coarse: None, fine: None });
        }
    }
    let coarse = composite_oracle(prims, spacing)?;
    let fine = composite_oracle(prims, spacing / 2.0)?;
    for (quantity, a, b) in [("area", coarse.area, fine.area), ("volume", coarse.volume, fine.volume)] {
        let change = percent_error(a, b);
        if change >= ORACLE_CONVERGENCE_PCT {
            return Err(MeasureError::OracleUnreliable { quantity, change, spacing });
        }
    }
    Ok(OracleReport {
        measurements: MeshMeasurements { surface_area: fine.area, volume: fine.volume },
        coarse: Some(coarse),
        fine: Some(fine),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::sim::{Label, Shape};
    use std::f64::consts::PI;

    fn unit_cube() -> TriangleMesh {
        let vertices = (0..8).map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect();
        TriangleMesh {
            vertices,
            triangles: vec![
                [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
                [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
            ],
        }
    }

    #[test]
    fn cube_area_and_volume() {
        let cube = unit_cube();
        assert_eq!(surface_area(&cube), 6.0);
        assert_eq!(volume(&cube).unwrap(), 1.0);
        let moved = cube.transformed(&RigidTransform::from_translation(Vec3::new(10.0, 10.0, 10.0)));
        assert!((volume(&moved).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_triangle_has_no_area() {
        let m = TriangleMesh { vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0], triangles: vec![[0, 1, 2]] };
        assert_eq!(surface_area(&m), 0.0);
    }

    #[test]
    fn open_mesh_volume_is_refused() {
        let mut cube = unit_cube();
        cube.triangles.truncate(10);
        assert!(matches!(volume(&cube), Err(MeasureError::NotWatertight { boundary_edges: 4 })));
    }

    #[test]
    fn closed_forms() {
        let b = box_reference([0.3, 0.4, 0.5]);
        assert!((b.surface_area - 0.94).abs() < 1e-12);
        assert!((b.volume - 0.06).abs() < 1e-12);
        let c = cylinder_reference(0.1, 0.3);
        assert!((c.surface_area - 0.251327).abs() < 1e-6);
        assert!((c.volume - 0.00942478).abs() < 1e-8);
    }

    #[test]
    fn composite_oracle_on_a_sphere() {
        let sphere = ScenePrimitive::new(
            Shape::Superellipsoid { semi_axes: [0.3, 0.3, 0.3], e1: 1.0, e2: 1.0 },
            RigidTransform::from_translation(Vec3::new(0.1, -0.2, 0.5)),
            [0.5; 3],
            Label::Target,
        );
        let est = composite_oracle(std::slice::from_ref(&sphere), 0.005).unwrap();
        let area = 4.0 * PI * 0.09;
        let vol = 4.0 / 3.0 * PI * 0.027;
        assert!(percent_error(est.area, area) < 0.1, "{}", est.area);
        assert!(percent_error(est.volume, vol) < 0.1, "{}", est.volume);
        let slack = 2.0 * est.spacing.powi(3) * est.surface_cells as f64;
        assert!((est.voxel_volume - est.volume).abs() <= slack);
    }

    #[test]
    fn overlapping_union_counts_shared_volume_once() {
        let a = ScenePrimitive::new(Shape::Box { half_extents: [0.1, 0.1, 0.1] }, RigidTransform::identity(), [0.5; 3], Label::Target);
        let b = ScenePrimitive::new(
            Shape::Box { half_extents: [0.1, 0.1, 0.1] },
            RigidTransform::from_translation(Vec3::new(0.1, 0.0, 0.0)),
            [0.5; 3],
            Label::Target,
        );
        let est = composite_oracle(&[a, b], 0.004).unwrap();
        // union is a 0.3 × 0.2 × 0.2 box
        assert!(percent_error(est.volume, 0.012) < 0.5, "{}", est.volume);
        assert!(percent_error(est.area, 2.0 * (0.06 + 0.04 + 0.06)) < 2.0, "{}", est.area);
    }

    #[test]
    fn single_primitive_uses_closed_form() {
        let c = ScenePrimitive::new(Shape::Cylinder { radius: 0.1, height: 0.3 }, RigidTransform::identity(), [0.5; 3], Label::Target);
        let r = oracle_measurements(&[c], 0.002).unwrap();
        assert!(r.coarse.is_none());
        assert!((r.measurements.volume - PI * 0.01 * 0.3).abs() < 1e-15);
    }
}
