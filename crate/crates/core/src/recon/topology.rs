//! Edge-based mesh topology checks and component culling.

use std::collections::HashMap;

use super::TriangleMesh;

/// Directed-edge use counts per undirected edge `(min, max)`:
/// `(uses as min→max, uses as max→min)`.
fn edge_uses(mesh: &TriangleMesh) -> HashMap<(u32, u32), (u32, u32)> {
    let mut uses: HashMap<(u32, u32), (u32, u32)> = HashMap::with_capacity(mesh.triangles.len() * 3 / 2);
    for t in &mesh.triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            let entry = uses.entry((a.min(b), a.max(b))).or_default();
            if a < b {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
    }
    uses
}

/// `(closed, boundary edge count)`: closed when every undirected edge is
/// used by exactly two triangles traversing it in opposite directions.
pub fn is_watertight(mesh: &TriangleMesh) -> (bool, usize) {
    if mesh.triangles.is_empty() {
        return (false, 0);
    }
    let uses = edge_uses(mesh);
    let boundary = uses.values().filter(|(f, b)| f + b == 1).count();
    let closed = uses.values().all(|&(f, b)| f == 1 && b == 1);
    (closed, boundary)
}

/// `V − E + F` counting only vertices referenced by a triangle.
pub fn euler_characteristic(mesh: &TriangleMesh) -> i64 {
    let mut referenced = vec![false; mesh.vertices.len()];
    for t in &mesh.triangles {
        for &v in t {
            referenced[v as usize] = true;
        }
    }
    let v = referenced.iter().filter(|&&r| r).count() as i64;
    let e = edge_uses(mesh).len() as i64;
    v - e + mesh.triangles.len() as i64
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi as usize] = lo;
        }
    }
}

/// Component label per triangle (vertex-connectivity), labels dense from 0
/// in order of first appearance.
pub fn triangle_components(mesh: &TriangleMesh) -> (Vec<usize>, usize) {
    let mut uf = UnionFind::new(mesh.vertices.len());
    for t in &mesh.triangles {
        uf.union(t[0], t[1]);
        uf.union(t[1], t[2]);
    }
    let mut label_of_root: HashMap<u32, usize> = HashMap::new();
    let labels = mesh
        .triangles
        .iter()
        .map(|t| {
            let root = uf.find(t[0]);
            let next = label_of_root.len();
            *label_of_root.entry(root).or_insert(next)
        })
        .collect();
    (labels, label_of_root.len())
}

/// Drops components holding less than `min_fraction` of all triangles and
/// compacts the vertex list.
pub fn cull_small_components(mesh: &TriangleMesh, min_fraction: f64) -> TriangleMesh {
    let (labels, count) = triangle_components(mesh);
    let mut sizes = vec![0usize; count];
    for &l in &labels {
        sizes[l] += 1;
    }
    let min = min_fraction * mesh.triangles.len() as f64;
    let triangles: Vec<[u32; 3]> = mesh
        .triangles
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| sizes[l] as f64 >= min)
        .map(|(t, _)| *t)
        .collect();
    compact(&TriangleMesh { vertices: mesh.vertices.clone(), triangles })
}

/// Removes unreferenced vertices, preserving order.
pub fn compact(mesh: &TriangleMesh) -> TriangleMesh {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let triangles = mesh
        .triangles
        .iter()
        .map(|t| {
            t.map(|v| {
                if remap[v as usize] == u32::MAX {
                    remap[v as usize] = vertices.len() as u32;
                    vertices.push(mesh.vertices[v as usize]);
                }
                remap[v as usize]
            })
        })
        .collect();
    TriangleMesh { vertices, triangles }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::Vec3;

    pub(crate) fn tetrahedron() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        }
    }

    pub(crate) fn unit_cube() -> TriangleMesh {
        let vertices = (0..8).map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect();
        let triangles = vec![
            [0, 2, 1], [1, 2, 3], // z = 0
            [4, 5, 6], [5, 7, 6], // z = 1
            [0, 1, 4], [1, 5, 4], // y = 0
            [2, 6, 3], [3, 6, 7], // y = 1
            [0, 4, 2], [2, 4, 6], // x = 0
            [1, 3, 5], [3, 7, 5], // x = 1
        ];
        TriangleMesh { vertices, triangles }
    }

    /// `n × n` quad grid on a torus, two triangles per quad.
    fn torus(n: u32) -> TriangleMesh {
        let (big, small) = (1.0, 0.3);
        let mut vertices = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (u, v) = (i as f64 / n as f64 * std::f64::consts::TAU, j as f64 / n as f64 * std::f64::consts::TAU);
                vertices.push(Vec3::new((big + small * v.cos()) * u.cos(), (big + small * v.cos()) * u.sin(), small * v.sin()));
            }
        }
        let id = |i: u32, j: u32| (i % n) * n + (j % n);
        let mut triangles = Vec::new();
        for i in 0..n {
            for j in 0..n {
                triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriangleMesh { vertices, triangles }
    }

    #[test]
    fn tetrahedron_is_closed() {
        assert_eq!(is_watertight(&tetrahedron()), (true, 0));
        assert_eq!(euler_characteristic(&tetrahedron()), 2);
    }

    #[test]
    fn single_triangle_is_open() {
        let m = TriangleMesh { vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y()], triangles: vec![[0, 1, 2]] };
        assert_eq!(is_watertight(&m), (false, 3));
    }

    #[test]
    fn cube_missing_a_face() {
        let mut m = unit_cube();
        assert_eq!(is_watertight(&m), (true, 0));
        m.triangles.truncate(10);
        assert_eq!(is_watertight(&m), (false, 4));
    }

    #[test]
    fn inconsistent_orientation_is_not_closed() {
        let mut m = tetrahedron();
        m.triangles[3] = [1, 3, 2];
        assert_eq!(is_watertight(&m), (false, 0));
    }

    #[test]
    fn euler_characteristics() {
        let t = tetrahedron();
        let mut two = t.clone();
        two.vertices.extend(t.vertices.iter().map(|v| v + Vec3::new(5.0, 0.0, 0.0)));
        two.triangles.extend(t.triangles.iter().map(|tri| tri.map(|i| i + 4)));
        assert_eq!(euler_characteristic(&two), 4);
        let tor = torus(8);
        assert_eq!(is_watertight(&tor), (true, 0));
        assert_eq!(euler_characteristic(&tor), 0);
    }

    #[test]
    fn culling_keeps_large_components() {
        let big = torus(16);
        let mut m = big.clone();
        let off = m.vertices.len() as u32;
        m.vertices.extend(tetrahedron().vertices.iter().map(|v| v * 0.01 + Vec3::new(3.0, 0.0, 0.0)));
        m.triangles.extend(tetrahedron().triangles.iter().map(|t| t.map(|i| i + off)));
        let (_, count) = triangle_components(&m);
        assert_eq!(count, 2);
        let culled = cull_small_components(&m, 0.01);
        assert_eq!(culled.triangles.len(), big.triangles.len());
        assert_eq!(culled.vertices.len(), big.vertices.len());
        assert_eq!(is_watertight(&culled), (true, 0));
    }
}
