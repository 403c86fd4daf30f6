use std::collections::HashMap;
use std::f64::consts::PI;

use proptest::prelude::*;
use tofscan::measure::{composite_oracle, measure, surface_area, volume};
use tofscan::recon::{euler_characteristic, is_watertight, TriangleMesh};
use tofscan::sim::make_animal_model;
use tofscan::{RigidTransform, Vec3};

fn unit_cube() -> TriangleMesh {
    let vertices = (0..8).map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect();
    let triangles = vec![
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
    ];
    TriangleMesh { vertices, triangles }
}

/// Icosahedron subdivided `level` times and projected onto the sphere.
fn icosphere(level: usize, r: f64) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
        (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
        (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let mut m = |p: u32, q: u32| {
                *mid.entry((p.min(q), p.max(q))).or_insert_with(|| {
                    vertices.push(((vertices[p as usize] + vertices[q as usize]) / 2.0).normalize());
                    vertices.len() as u32 - 1
                })
            };
            let (ab, bc, ca) = (m(a, b), m(b, c), m(c, a));
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    TriangleMesh { vertices: vertices.into_iter().map(|v| v * r).collect(), triangles }
}

/// Ray-parity inside test along +x (Möller–Trumbore).
fn inside(mesh: &TriangleMesh, p: &Vec3) -> bool {
    let d = Vec3::new(1.0, 1e-7, 2e-7).normalize();
    let mut hits = 0;
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        let (e1, e2) = (b - a, c - a);
        let h = d.cross(&e2);
        let det = e1.dot(&h);
        if det.abs() < 1e-15 {
            continue;
        }
        let s = p - a;
        let u = s.dot(&h) / det;
        let q = s.cross(&e1);
        let v = d.dot(&q) / det;
        if u < 0.0 || v < 0.0 || u + v > 1.0 {
            continue;
        }
        if e2.dot(&q) / det > 0.0 {
            hits += 1;
        }
    }
    hits % 2 == 1
}

/// `(inside cells · h³, boundary cell count)` on a grid of cell centres.
fn voxelize(mesh: &TriangleMesh, h: f64) -> (f64, usize) {
    let (mut lo, mut hi) = (mesh.vertices[0], mesh.vertices[0]);
    for v in &mesh.vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    lo -= Vec3::repeat(h);
    hi += Vec3::repeat(h);
    let n = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / h).ceil() as usize);
    let idx = |i: usize, j: usize, k: usize| i + n[0] * (j + n[1] * k);
    let mut flags = vec![false; n[0] * n[1] * n[2]];
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let c = lo + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * h;
                flags[idx(i, j, k)] = inside(mesh, &c);
            }
        }
    }
    let mut boundary = 0;
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let f = flags[idx(i, j, k)];
                let differs = [(1, 0, 0), (0, 1, 0), (0, 0, 1)].iter().any(|&(di, dj, dk)| {
                    let (a, b, c) = (i + di, j + dj, k + dk);
                    a < n[0] && b < n[1] && c < n[2] && flags[idx(a, b, c)] != f
                });
                if differs {
                    boundary += 1;
                }
            }
        }
    }
    (flags.iter().filter(|f| **f).count() as f64 * h.powi(3), boundary)
}

#[test]
fn icosphere_area_and_volume() {
    let mesh = icosphere(4, 1.0);
    assert_eq!(euler_characteristic(&mesh), 2);
    let m = measure(&mesh).unwrap();
    assert!((m.surface_area / (4.0 * PI) - 1.0).abs() < 0.005, "area {}", m.surface_area);
    assert!((m.volume / (4.0 * PI / 3.0) - 1.0).abs() < 0.01, "volume {}", m.volume);
}

#[test]
fn translated_cube_keeps_unit_volume() {
    let moved = unit_cube().transformed(&RigidTransform::from_translation(Vec3::new(10.0, 10.0, 10.0)));
    assert!((volume(&moved).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(surface_area(&unit_cube()), 6.0);
}

#[test]
fn divergence_volume_matches_voxelization() {
    for (name, mesh, h) in [("cube", unit_cube(), 0.05), ("sphere", icosphere(3, 0.5), 0.04)] {
        let v = volume(&mesh).unwrap();
        let (vox, boundary) = voxelize(&mesh, h);
        let bound = 2.0 * h.powi(3) * boundary as f64;
        assert!((v - vox).abs() <= bound, "{name}: divergence {v} voxel {vox} bound {bound}");
    }
    let scene = make_animal_model(1.0);
    let targets: Vec<_> = scene.targets().cloned().collect();
    let est = composite_oracle(&targets, 0.01).unwrap();
    let bound = 2.0 * 0.01f64.powi(3) * est.surface_cells as f64;
    assert!((est.volume - est.voxel_volume).abs() <= bound, "animal: {est:?}");
}

#[test]
fn animal_oracle_volume_scales_cubically() {
    let oracle = |s: f64| {
        let scene = make_animal_model(s);
        let targets: Vec<_> = scene.targets().cloned().collect();
        composite_oracle(&targets, 0.004).unwrap()
    };
    let (one, two) = (oracle(1.0), oracle(2.0));
    let ratio = two.volume / one.volume;
    assert!((ratio / 8.0 - 1.0).abs() < 0.005, "volume ratio {ratio}");
}

fn random_rigid() -> impl Strategy<Value = RigidTransform> {
    (prop::array::uniform3(-1.0..1.0f64), 0.0..PI, prop::array::uniform3(-20.0..20.0f64)).prop_filter_map(
        "zero axis",
        |(axis, angle, t)| {
            let axis = Vec3::from(axis);
            (axis.norm() > 1e-3).then(|| RigidTransform::from_axis_angle(axis.normalize(), angle, Vec3::from(t)))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_is_invariant_under_rigid_motion(t in random_rigid()) {
        let mesh = icosphere(2, 0.7);
        let v0 = volume(&mesh).unwrap();
        let v1 = volume(&mesh.transformed(&t)).unwrap();
        prop_assert!((v1 - v0).abs() <= 1e-9 * v0);
    }

    #[test]
    fn area_is_invariant_under_reindexing(perm_seed in any::<u64>(), rotate in 0usize..3) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mesh = icosphere(2, 1.3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        let mut order: Vec<u32> = (0..mesh.vertices.len() as u32).collect();
        order.shuffle(&mut rng);
        let mut new_index = vec![0u32; order.len()];
        let mut vertices = vec![Vec3::zeros(); order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old as usize] = new as u32;
            vertices[new] = mesh.vertices[old as usize];
        }
        let mut triangles: Vec<[u32; 3]> = mesh
            .triangles
            .iter()
            .map(|t| {
                let t = t.map(|i| new_index[i as usize]);
                [t[rotate % 3], t[(rotate + 1) % 3], t[(rotate + 2) % 3]]
            })
            .collect();
        triangles.shuffle(&mut rng);
        let shuffled = TriangleMesh { vertices, triangles };
        prop_assert!(is_watertight(&shuffled).0);
        prop_assert_eq!(surface_area(&mesh), surface_area(&shuffled));
    }
}
