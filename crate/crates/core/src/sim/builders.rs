//! Scene and rig constructors: calibration cube, synthetic animal, known
//! objects, and the two reference sensor layouts.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Unit};
use serde::{Deserialize, Serialize};

use super::{Label, Pattern, Scene, ScenePrimitive, SensorModel, Shape};
use crate::geometry::{CameraIntrinsics, RigidTransform, Vec3};

/// Accepted bounding-box length of the animal at scale 1, meters.
pub const ANIMAL_LENGTH_RANGE: (f64, f64) = (2.2, 2.6);

/// Tag side as a fraction of its layout cell.
const TAG_FILL: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub id: u32,
    pub face: usize,
    /// Counter-clockwise seen from outside the cube, cube frame.
    pub corners: [Vec3; 4],
    pub normal: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagModel {
    pub edge: f64,
    pub side: f64,
    pub tags: Vec<Tag>,
}

impl TagModel {
    pub fn corner_map(&self) -> BTreeMap<u32, [Vec3; 4]> {
        self.tags.iter().map(|t| (t.id, t.corners)).collect()
    }

    pub fn tag(&self, id: u32) -> Option<&Tag> {
        self.tags.iter().find(|t| t.id == id)
    }
}

/// `(normal, u axis, v axis)` per face with `u × v = normal`.
fn faces() -> [(Vec3, Vec3, Vec3); 6] {
    let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
    [(x, y, z), (-x, z, y), (y, z, x), (-y, x, z), (z, x, y), (-z, y, x)]
}

fn grid_size(tags_per_face: u32) -> u32 {
    (tags_per_face as f64).sqrt().ceil().max(1.0) as u32
}

/// Cube-face layout: tag centre in face coordinates for slot `k`.
fn slot_center(edge: f64, g: u32, k: u32) -> (f64, f64) {
    let cell = edge / g as f64;
    let (row, col) = (k / g, k % g);
    (-edge / 2.0 + (col as f64 + 0.5) * cell, -edge / 2.0 + (row as f64 + 0.5) * cell)
}

pub fn make_calibration_cube(edge: f64, tags_per_face: u32) -> (Scene, TagModel) {
    assert!(edge > 0.0, "cube edge must be positive");
    let n = tags_per_face.max(1);
    let g = grid_size(n);
    let side = TAG_FILL * edge / g as f64;
    let h = edge / 2.0;
    let mut tags = Vec::new();
    for (face, (normal, ua, va)) in faces().into_iter().enumerate() {
        for k in 0..n {
            let (cu, cv) = slot_center(edge, g, k);
            let s = side / 2.0;
            let corner = |du: f64, dv: f64| normal * h + ua * (cu + du) + va * (cv + dv);
            tags.push(Tag {
                id: face as u32 * n + k,
                face,
                corners: [corner(-s, -s), corner(s, -s), corner(s, s), corner(-s, s)],
                normal,
            });
        }
    }
    let cube = ScenePrimitive::new(
        Shape::Box { half_extents: [h, h, h] },
        RigidTransform::identity(),
        [0.92, 0.92, 0.9],
        Label::Target,
    )
    .with_pattern(Pattern::Tags { tags_per_face: n });
    (Scene::new(vec![cube]), TagModel { edge, side, tags })
}

/// Albedo factor at a local point on a tagged box, `None` off the tags.
pub(super) fn tag_albedo(local: &Vec3, half: &Vec3, tags_per_face: u32) -> Option<f64> {
    let rel = local.component_div(half);
    let axis = rel.iamax();
    let sign = rel[axis].signum();
    let (_, ua, va) = faces().into_iter().find(|(n, _, _)| n[axis] == sign)?;
    let edge = 2.0 * half.x;
    let n = tags_per_face.max(1);
    let g = grid_size(n);
    let cell = edge / g as f64;
    let (pu, pv) = (local.dot(&ua), local.dot(&va));
    let col = ((pu + edge / 2.0) / cell).floor().clamp(0.0, g as f64 - 1.0) as u32;
    let row = ((pv + edge / 2.0) / cell).floor().clamp(0.0, g as f64 - 1.0) as u32;
    let k = row * g + col;
    if k >= n {
        return None;
    }
    let (cu, cv) = slot_center(edge, g, k);
    let (du, dv) = ((pu - cu).abs(), (pv - cv).abs());
    let s = TAG_FILL * cell / 2.0;
    if du > s || dv > s {
        return None;
    }
    // off-centre light square makes each tag rotationally asymmetric
    let inner = (pu - cu - 0.15 * cell).abs() < 0.12 * cell && (pv - cv - 0.1 * cell).abs() < 0.12 * cell;
    Some(if inner { 1.0 } else { 0.08 })
}

fn z_to(dir: &Vec3) -> Rotation3<f64> {
    Rotation3::rotation_between(&Vec3::z(), dir).unwrap_or_else(|| Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::x()), std::f64::consts::PI))
}

/// Capsule whose segment runs from `a` to `b`.
pub fn capsule_between(a: Vec3, b: Vec3, radius: f64) -> (Shape, RigidTransform) {
    let axis = b - a;
    let shape = Shape::Capsule { radius, length: axis.norm() };
    let pose = RigidTransform { rotation: *z_to(&axis).matrix(), translation: (a + b) / 2.0 };
    (shape, pose)
}

fn textured(shape: Shape, pose: RigidTransform, albedo: [f64; 3], wavelength: f64) -> ScenePrimitive {
    ScenePrimitive::new(shape, pose, albedo, Label::Target).with_pattern(Pattern::Waves { wavelength, contrast: 0.5 })
}

/// Box of full dimensions `dims` labeled target with a smooth texture.
pub fn box_object(dims: [f64; 3], pose: RigidTransform, albedo: [f64; 3]) -> ScenePrimitive {
    let wl = dims.iter().cloned().fold(f64::INFINITY, f64::min).max(0.05) * 0.8;
    textured(Shape::Box { half_extents: dims.map(|d| d / 2.0) }, pose, albedo, wl)
}

/// Cylinder (axis along the pose's `z`) labeled target with a smooth texture.
pub fn cylinder_object(radius: f64, height: f64, pose: RigidTransform, albedo: [f64; 3]) -> ScenePrimitive {
    textured(Shape::Cylinder { radius, height }, pose, albedo, (radius * 1.2).max(0.05))
}

/// Synthetic animal standing in a chute, feet at `z = 0`, facing `+x`.
pub fn make_animal_model(scale: f64) -> Scene {
    assert!(scale > 0.0, "scale must be positive");
    let s = scale;
    let at = |x: f64, y: f64, z: f64| Vec3::new(x, y, z) * s;
    let hide = [0.55, 0.36, 0.22];
    let wave = 0.35 * s;
    let mut prims = vec![textured(
        Shape::Superellipsoid { semi_axes: [0.85 * s, 0.30 * s, 0.36 * s], e1: 0.7, e2: 0.8 },
        RigidTransform::from_translation(at(0.0, 0.0, 1.15)),
        hide,
        wave,
    )];
    for (x, y) in [(0.55, 0.15), (0.55, -0.15), (-0.55, 0.15), (-0.55, -0.15)] {
        let (shape, pose) = capsule_between(at(x, y, 0.07), at(x, y, 0.95), 0.07 * s);
        prims.push(textured(shape, pose, hide, wave));
    }
    let (neck, neck_pose) = capsule_between(at(0.75, 0.0, 1.25), at(1.1, 0.0, 1.4), 0.14 * s);
    prims.push(textured(neck, neck_pose, hide, wave));
    prims.push(textured(
        Shape::Superellipsoid { semi_axes: [0.25 * s, 0.13 * s, 0.15 * s], e1: 1.0, e2: 1.0 },
        RigidTransform::from_translation(at(1.28, 0.0, 1.35)),
        hide,
        wave,
    ));
    for y in [0.5, -0.5] {
        prims.push(ScenePrimitive::new(
            Shape::Box { half_extents: [1.65 * s, 0.01 * s, 0.1 * s] },
            RigidTransform::from_translation(at(0.15, y, 0.55)),
            [0.5, 0.5, 0.55],
            Label::Chute,
        ));
    }
    let scene = Scene::new(prims);
    let (lo, hi) = scene.target_bounds().expect("animal has targets");
    let length = (hi.x - lo.x) / s;
    assert!(
        (ANIMAL_LENGTH_RANGE.0..=ANIMAL_LENGTH_RANGE.1).contains(&length),
        "animal length {length} m outside {ANIMAL_LENGTH_RANGE:?}"
    );
    scene
}

/// Sensors on `stations` evenly spaced azimuths around `center`, one per
/// elevation at each station, ordered so consecutive sensors are neighbours.
pub fn ring_rig(
    stations: usize,
    elevations_deg: &[f64],
    radius: f64,
    center: Vec3,
    intrinsics: CameraIntrinsics,
) -> Vec<SensorModel> {
    let mut rig = Vec::new();
    for k in 0..stations {
        let az = std::f64::consts::TAU * k as f64 / stations as f64;
        let mut els: Vec<f64> = elevations_deg.to_vec();
        if k % 2 == 1 {
            els.reverse();
        }
        for el in els {
            let el = el.to_radians();
            let eye = center + radius * Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin());
            let id = rig.len() as u32;
            rig.push(SensorModel::new(id, intrinsics, RigidTransform::look_at(eye, center, Vec3::z())));
        }
    }
    rig
}

/// Ten sensors in upper/lower pairs on five rods around `center`.
pub fn ten_sensor_rod_rig(center: Vec3, radius: f64) -> Vec<SensorModel> {
    ring_rig(5, &[35.0, -35.0], radius, center, CameraIntrinsics::default())
}

/// Eight sensors around the chute: two covering the head, four along the
/// sides and two overhead, listed in physical order around the frame.
pub fn eight_sensor_chute_rig(scale: f64) -> Vec<SensorModel> {
    let s = scale;
    let at = |x: f64, y: f64, z: f64| Vec3::new(x, y, z) * s;
    let views = [
        (at(2.5, 1.0, 1.8), at(1.1, 0.0, 1.2)),
        (at(0.75, 1.7, 1.3), at(0.75, 0.0, 1.0)),
        (at(-0.45, 1.7, 1.3), at(-0.45, 0.0, 1.0)),
        (at(-0.4, 0.2, 3.0), at(-0.3, 0.0, 1.2)),
        (at(0.9, -0.2, 3.0), at(0.8, 0.0, 1.2)),
        (at(-0.45, -1.7, 1.3), at(-0.45, 0.0, 1.0)),
        (at(0.75, -1.7, 1.3), at(0.75, 0.0, 1.0)),
        (at(2.5, -1.0, 1.8), at(1.1, 0.0, 1.2)),
    ];
    views
        .iter()
        .enumerate()
        .map(|(i, (eye, target))| {
            SensorModel::new(i as u32, CameraIntrinsics::default(), RigidTransform::look_at(*eye, *target, Vec3::z()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::render;

    #[test]
    fn cube_tags_lie_on_surface() {
        let (scene, model) = make_calibration_cube(0.5, 1);
        assert_eq!(scene.primitives.len(), 1);
        assert_eq!(model.tags.len(), 6);
        let corners: Vec<Vec3> = model.tags.iter().flat_map(|t| t.corners).collect();
        assert_eq!(corners.len(), 24);
        for c in &corners {
            assert!((c.abs().max() - 0.25).abs() < 1e-12);
        }
        for t in &model.tags {
            for i in 0..4 {
                let d = (t.corners[i] - t.corners[(i + 1) % 4]).norm();
                assert!((d - model.side).abs() < 1e-12);
            }
            let n = (t.corners[1] - t.corners[0]).cross(&(t.corners[2] - t.corners[1]));
            assert!(n.dot(&t.normal) > 0.0, "corners wind counter-clockwise from outside");
        }
        assert_eq!(make_calibration_cube(0.5, 1).1, model);
    }

    #[test]
    fn multiple_tags_per_face_are_disjoint() {
        let (_, model) = make_calibration_cube(0.4, 4);
        assert_eq!(model.tags.len(), 24);
        let ids: std::collections::BTreeSet<u32> = model.tags.iter().map(|t| t.id).collect();
        assert_eq!(ids.len(), 24);
        for face in 0..6 {
            let on_face: Vec<&Tag> = model.tags.iter().filter(|t| t.face == face).collect();
            for (i, a) in on_face.iter().enumerate() {
                for b in &on_face[i + 1..] {
                    let ca = a.corners.iter().sum::<Vec3>() / 4.0;
                    let cb = b.corners.iter().sum::<Vec3>() / 4.0;
                    assert!((ca - cb).norm() >= model.side);
                }
            }
        }
    }

    #[test]
    fn tag_texture_matches_corner_layout() {
        let (_, model) = make_calibration_cube(0.5, 1);
        let half = Vec3::new(0.25, 0.25, 0.25);
        for t in &model.tags {
            let centre = t.corners.iter().sum::<Vec3>() / 4.0;
            let near_corner = t.corners[0] * 0.97 + centre * 0.03;
            assert_eq!(tag_albedo(&near_corner, &half, 1), Some(0.08));
            let outside = t.corners[0] + (t.corners[0] - centre) * 0.2;
            assert_eq!(tag_albedo(&outside, &half, 1), None);
        }
    }

    #[test]
    fn animal_dimensions_and_labels() {
        let scene = make_animal_model(1.0);
        let (lo, hi) = scene.target_bounds().unwrap();
        assert!((2.2..=2.6).contains(&(hi.x - lo.x)));
        assert!(lo.z.abs() < 1e-9);
        let chute: Vec<_> = scene.primitives.iter().filter(|p| p.label == Label::Chute).collect();
        assert_eq!(chute.len(), 2);
        scene.validate().unwrap();
    }

    #[test]
    fn capsule_between_endpoints() {
        let a = Vec3::new(0.1, 0.2, 0.3);
        let b = Vec3::new(0.5, -0.1, 0.9);
        let (shape, pose) = capsule_between(a, b, 0.05);
        let Shape::Capsule { length, .. } = shape else { panic!() };
        let top = pose.apply_point(&Vec3::new(0.0, 0.0, length / 2.0));
        assert!((top - b).norm() < 1e-12);
    }

    #[test]
    fn rigs_look_at_their_subjects() {
        let rig = ten_sensor_rod_rig(Vec3::new(0.0, 0.0, 1.0), 1.2);
        assert_eq!(rig.len(), 10);
        for s in &rig {
            assert!(s.sees_point(&Vec3::new(0.0, 0.0, 1.0), 6.0));
        }
        let scene = make_animal_model(1.0);
        let chute = eight_sensor_chute_rig(1.0);
        assert_eq!(chute.len(), 8);
        for s in &chute {
            let mut small = s.clone();
            small.intrinsics = CameraIntrinsics::new(63.0, 63.0, 40.0, 36.0, 80, 72).unwrap();
            let r = render(&scene, &small);
            assert!(r.oracle_mask.count() > 300, "sensor {} sees {} target pixels", s.id, r.oracle_mask.count());
        }
    }
}
