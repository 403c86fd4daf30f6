//! Marching cubes over a node grid.
//!
//! Corner `c` of a cell sits at offset `CORNERS[c]`; cube edges follow the
//! classic table layout. Corners with value below the iso level are outside,
//! and the emitted triangles wind counter-clockwise seen from outside.

use std::collections::HashMap;

use super::mc_table::TRI_TABLE;
use super::{ScalarGrid, TriangleMesh};
use crate::geometry::Vec3;

pub(crate) const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

pub(crate) const EDGE_CORNERS: [[usize; 2]; 12] =
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Interpolation parameters are kept away from the edge ends so vertices on
/// different edges never coincide.
const T_CLAMP: f64 = 1e-3;

/// Lower corner and axis of each edge, for welding shared vertices.
fn edge_key(edge: usize) -> ([usize; 3], u8) {
    let [a, b] = EDGE_CORNERS[edge];
    let (ca, cb) = (CORNERS[a], CORNERS[b]);
    let axis = (0..3).find(|&k| ca[k] != cb[k]).expect("edge spans one axis") as u8;
    let lower = [ca[0].min(cb[0]), ca[1].min(cb[1]), ca[2].min(cb[2])];
    (lower, axis)
}

pub(crate) fn interpolation(va: f64, vb: f64, iso: f64) -> f64 {
    let denom = vb - va;
    let t = if denom.abs() < 1e-300 { 0.5 } else { (iso - va) / denom };
    t.clamp(T_CLAMP, 1.0 - T_CLAMP)
}

pub(crate) fn cube_index(values: &[f64; 8], iso: f64) -> usize {
    let mut idx = 0;
    for (c, v) in values.iter().enumerate() {
        if *v < iso {
            idx |= 1 << c;
        }
    }
    idx
}

/// Calls `emit` with edge triples for the triangles of one cell.
pub(crate) fn cell_triangles(index: usize, mut emit: impl FnMut([usize; 3])) {
    let row = &TRI_TABLE[index];
    let mut k = 0;
    while k + 2 < 16 && row[k] >= 0 {
        emit([row[k] as usize, row[k + 1] as usize, row[k + 2] as usize]);
        k += 3;
    }
}

/// Triangle soup for a single cell with corner positions `pos`.
pub(crate) fn polygonize_cell(values: &[f64; 8], pos: &[Vec3; 8], iso: f64, mut emit: impl FnMut([Vec3; 3])) {
    let index = cube_index(values, iso);
    if index == 0 || index == 255 {
        return;
    }
    let vertex = |e: usize| {
        let [a, b] = EDGE_CORNERS[e];
        let t = interpolation(values[a], values[b], iso);
        pos[a] + (pos[b] - pos[a]) * t
    };
    cell_triangles(index, |[e0, e1, e2]| emit([vertex(e0), vertex(e1), vertex(e2)]));
}

/// Iso-surface of `grid` at `iso` with vertices shared between cells.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = grid.dims;
    let mut mesh = TriangleMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut welded: HashMap<(usize, u8), u32> = HashMap::new();
    let keys: Vec<([usize; 3], u8)> = (0..12).map(edge_key).collect();
    let mut values = [0.0; 8];
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for (c, off) in CORNERS.iter().enumerate() {
                    values[c] = grid.values[grid.index(i + off[0], j + off[1], k + off[2])];
                }
                let index = cube_index(&values, iso);
                if index == 0 || index == 255 {
                    continue;
                }
                let mut vertex = |e: usize| -> u32 {
                    let (lo, axis) = keys[e];
                    let node = grid.index(i + lo[0], j + lo[1], k + lo[2]);
                    *welded.entry((node, axis)).or_insert_with(|| {
                        let [a, b] = EDGE_CORNERS[e];
                        let t = interpolation(values[a], values[b], iso);
                        let pa = grid.node_position(i + CORNERS[a][0], j + CORNERS[a][1], k + CORNERS[a][2]);
                        let pb = grid.node_position(i + CORNERS[b][0], j + CORNERS[b][1], k + CORNERS[b][2]);
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                let mut tris = Vec::with_capacity(5);
                cell_triangles(index, |[e0, e1, e2]| tris.push([e0, e1, e2]));
                for [e0, e1, e2] in tris {
                    let tri = [vertex(e0), vertex(e1), vertex(e2)];
                    mesh.triangles.push(tri);
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::topology::{euler_characteristic, is_watertight};

    fn sphere_grid(n: usize, r: f64) -> ScalarGrid {
        let h = 2.0 / (n - 1) as f64;
        let mut g = ScalarGrid::new([n, n, n], Vec3::new(-1.0, -1.0, -1.0), h);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let p = g.node_position(i, j, k);
                    let idx = g.index(i, j, k);
                    g.values[idx] = r - p.norm();
                }
            }
        }
        g
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let mesh = marching_cubes(&sphere_grid(40, 0.6), 0.0);
        assert_eq!(is_watertight(&mesh), (true, 0));
        assert_eq!(euler_characteristic(&mesh), 2);
        let vol = mesh.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.6f64.powi(3);
        assert!(vol > 0.0);
        assert!((vol - exact).abs() / exact < 0.02, "{vol} vs {exact}");
    }

    #[test]
    fn every_case_is_closed_within_a_cell() {
        // each non-trivial configuration in isolation inside a 3x3x3 grid
        // produces a closed surface
        for case in 1..255usize {
            let mut g = ScalarGrid::new([4, 4, 4], Vec3::zeros(), 1.0);
            g.values.fill(1.0);
            for (c, off) in CORNERS.iter().enumerate() {
                if case & (1 << c) != 0 {
                    let idx = g.index(1 + off[0], 1 + off[1], 1 + off[2]);
                    g.values[idx] = -1.0;
                }
            }
            let mesh = marching_cubes(&g, 0.0);
            let (closed, boundary) = is_watertight(&mesh);
            assert!(closed, "case {case}: {boundary} boundary edges");
        }
    }

    #[test]
    fn soup_matches_welded_mesh_area() {
        let g = sphere_grid(20, 0.55);
        let mesh = marching_cubes(&g, 0.0);
        let mut soup_area = 0.0;
        let n = g.dims[0];
        for k in 0..n - 1 {
            for j in 0..n - 1 {
                for i in 0..n - 1 {
                    let mut vals = [0.0; 8];
                    let mut pos = [Vec3::zeros(); 8];
                    for (c, off) in CORNERS.iter().enumerate() {
                        vals[c] = g.values[g.index(i + off[0], j + off[1], k + off[2])];
                        pos[c] = g.node_position(i + off[0], j + off[1], k + off[2]);
                    }
                    polygonize_cell(&vals, &pos, 0.0, |[a, b, c]| soup_area += 0.5 * (b - a).cross(&(c - a)).norm());
                }
            }
        }
        assert!((soup_area - mesh.surface_area()).abs() < 1e-9);
    }
}
