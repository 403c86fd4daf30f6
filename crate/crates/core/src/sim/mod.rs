//! Ray-cast RGBD simulator standing in for the physical sensor rig.

mod builders;
mod shapes;

use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, ColorImage, DepthImage, Rgb, RigidTransform, Vec3};
use crate::segmentation::BinaryMask;

pub use builders::{
    box_object, capsule_between, cylinder_object, eight_sensor_chute_rig, make_animal_model, make_calibration_cube,
    ring_rig, ten_sensor_rod_rig, Tag, TagModel, ANIMAL_LENGTH_RANGE,
};
pub use shapes::{LocalHit, Shape, Superellipsoid};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid primitive {index}: {reason}")]
    InvalidPrimitive { index: usize, reason: String },
    #[error("invalid sensor {id}: {reason}")]
    InvalidSensor { id: u32, reason: String },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid interference model: {0}")]
    InvalidInterference(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Target,
    Chute,
    Background,
}

/// Surface albedo modulation evaluated in the primitive's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Pattern {
    #[default]
    Solid,
    /// Smooth product-of-sines texture; gives colour gradients everywhere.
    Waves { wavelength: f64, contrast: f64 },
    /// Dark square tags with a light centre on each face of a box.
    Tags { tags_per_face: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub shape: Shape,
    /// Local-to-world.
    pub pose: RigidTransform,
    pub albedo: [f64; 3],
    pub label: Label,
    #[serde(default)]
    pub pattern: Pattern,
}

impl ScenePrimitive {
    pub fn new(shape: Shape, pose: RigidTransform, albedo: [f64; 3], label: Label) -> Self {
        ScenePrimitive { shape, pose, albedo, label, pattern: Pattern::Solid }
    }

    pub fn with_pattern(mut self, pattern: Pattern) -> Self {
        self.pattern = pattern;
        self
    }

    /// World-frame axis-aligned bounds.
    pub fn world_bounds(&self) -> (Vec3, Vec3) {
        let h = self.shape.local_half_extents();
        let r = self.pose.rotation.abs();
        let ext = r * h;
        (self.pose.translation - ext, self.pose.translation + ext)
    }

    pub fn implicit_world(&self, p: &Vec3) -> f64 {
        let local = self.pose.rotation.transpose() * (p - self.pose.translation);
        self.shape.implicit(&local)
    }

    fn albedo_at(&self, local: &Vec3) -> Rgb {
        let base = Rgb::from(self.albedo);
        match self.pattern {
            Pattern::Solid => base,
            Pattern::Waves { wavelength, contrast } => {
                let k = std::f64::consts::TAU / wavelength;
                let s = (k * local.x).sin() * (k * local.y).sin() * (k * local.z + 0.7).sin();
                base * (1.0 - contrast * 0.5 * (1.0 + s))
            }
            Pattern::Tags { tags_per_face } => match self.shape {
                Shape::Box { half_extents } => {
                    builders::tag_albedo(local, &Vec3::from(half_extents), tags_per_face).map_or(base, |v| base * v)
                }
                _ => base,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    /// Hits farther than this (meters, z-range) are treated as misses.
    pub background_depth_cap: f64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene { primitives: Vec::new(), background_depth_cap: 6.0 }
    }
}

impl Scene {
    pub fn new(primitives: Vec<ScenePrimitive>) -> Self {
        Scene { primitives, ..Scene::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.background_depth_cap > 0.0) {
            return Err(SimError::InvalidScene(format!("background depth cap {} must be positive", self.background_depth_cap)));
        }
        for (index, p) in self.primitives.iter().enumerate() {
            p.shape.validate().map_err(|reason| SimError::InvalidPrimitive { index, reason })?;
            if p.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(SimError::InvalidPrimitive { index, reason: "albedo outside [0,1]".into() });
            }
        }
        Ok(())
    }

    pub fn has_target(&self) -> bool {
        self.primitives.iter().any(|p| p.label == Label::Target)
    }

    pub fn targets(&self) -> impl Iterator<Item = &ScenePrimitive> {
        self.primitives.iter().filter(|p| p.label == Label::Target)
    }

    /// Moves every primitive by `t` (applied after each primitive's pose).
    pub fn transformed(&self, t: &RigidTransform) -> Scene {
        let primitives = self
            .primitives
            .iter()
            .map(|p| ScenePrimitive { pose: t.compose(&p.pose), ..p.clone() })
            .collect();
        Scene { primitives, background_depth_cap: self.background_depth_cap }
    }

    pub fn merged(mut self, other: Scene) -> Scene {
        self.primitives.extend(other.primitives);
        self
    }

    /// Union of world bounds over target primitives.
    pub fn target_bounds(&self) -> Option<(Vec3, Vec3)> {
        self.targets().map(|p| p.world_bounds()).reduce(|(a0, a1), (b0, b1)| (a0.inf(&b0), a1.sup(&b1)))
    }

    pub fn load(path: &Path) -> crate::Result<Scene> {
        let scene: Scene = crate::io::read_json(path)?;
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub id: u32,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world.
    pub pose: RigidTransform,
    /// σ(z) = sigma0 + sigma1·z², meters.
    pub sigma0: f64,
    pub sigma1: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl SensorModel {
    pub fn new(id: u32, intrinsics: CameraIntrinsics, pose: RigidTransform) -> Self {
        SensorModel { id, intrinsics, pose, sigma0: 0.001, sigma1: 0.001, dropout: 0.002, seed: id as u64 }
    }

    pub fn noiseless(mut self) -> Self {
        self.sigma0 = 0.0;
        self.sigma1 = 0.0;
        self.dropout = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| SimError::InvalidSensor { id: self.id, reason };
        self.intrinsics.validate().map_err(|e| bad(e.to_string()))?;
        if !(self.sigma0 >= 0.0 && self.sigma1 >= 0.0) {
            return Err(bad("noise sigmas must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(bad(format!("dropout {} outside [0,1]", self.dropout)));
        }
        Ok(())
    }

    pub fn sigma(&self, z: f64) -> f64 {
        self.sigma0 + self.sigma1 * z * z
    }

    /// Whether a world point projects inside the raster within `max_depth`.
    pub fn sees_point(&self, p: &Vec3, max_depth: f64) -> bool {
        let c = self.pose.inverse().apply_point(p);
        if c.z <= 0.0 || c.z > max_depth {
            return false;
        }
        let i = &self.intrinsics;
        let u = i.fx * c.x / c.z + i.cx;
        let v = i.fy * c.y / c.z + i.cy;
        u >= -0.5 && v >= -0.5 && u < i.width as f64 - 0.5 && v < i.height as f64 - 0.5
    }

    pub fn load_rig(path: &Path) -> crate::Result<Vec<SensorModel>> {
        let rig: Vec<SensorModel> = crate::io::read_json(path)?;
        for s in &rig {
            s.validate()?;
        }
        Ok(rig)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub depth: DepthImage,
    pub color: ColorImage,
    pub oracle_mask: BinaryMask,
}

/// Nearest hit of a world ray against the scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneHit {
    pub primitive: usize,
    /// Ray parameter; equals z-range when the ray direction has unit `z` in
    /// the camera frame.
    pub t: f64,
    pub normal: Vec3,
    pub local_point: Vec3,
}

struct Prepared<'a> {
    prim: &'a ScenePrimitive,
    world_to_local: Matrix3<f64>,
    center: Vec3,
    radius_sq: f64,
}

struct Caster<'a> {
    prims: Vec<Prepared<'a>>,
}

impl<'a> Caster<'a> {
    fn new(scene: &'a Scene) -> Self {
        let prims = scene
            .primitives
            .iter()
            .map(|prim| {
                let r = prim.shape.local_half_extents().norm();
                Prepared {
                    prim,
                    world_to_local: prim.pose.rotation.transpose(),
                    center: prim.pose.translation,
                    radius_sq: r * r,
                }
            })
            .collect();
        Caster { prims }
    }

    fn cast(&self, o: &Vec3, d: &Vec3) -> Option<SceneHit> {
        let dd = d.norm_squared();
        let mut best: Option<SceneHit> = None;
        for (index, p) in self.prims.iter().enumerate() {
            let oc = p.center - o;
            let along = oc.dot(d);
            if oc.norm_squared() - along * along / dd > p.radius_sq {
                continue;
            }
            if along < 0.0 && oc.norm_squared() > p.radius_sq {
                continue;
            }
            let lo = p.world_to_local * (o - p.center);
            let ld = p.world_to_local * d;
            if let Some(hit) = p.prim.shape.intersect(&lo, &ld) {
                if best.is_none_or(|b| hit.t < b.t) {
                    best = Some(SceneHit {
                        primitive: index,
                        t: hit.t,
                        normal: p.prim.pose.rotation * hit.normal,
                        local_point: lo + ld * hit.t,
                    });
                }
            }
        }
        best
    }
}

/// Nearest intersection of the world ray `o + t d` with any primitive.
pub fn cast_ray(scene: &Scene, o: &Vec3, d: &Vec3) -> Option<SceneHit> {
    Caster::new(scene).cast(o, d)
}

/// Fixed world-frame light direction (towards the light).
pub fn light_direction() -> Vec3 {
    Vec3::new(0.35, -0.45, 0.82).normalize()
}

fn shade(albedo: &Rgb, normal: &Vec3) -> Rgb {
    let lambert = 0.5 + 0.5 * normal.dot(&light_direction());
    albedo * (0.3 + 0.7 * lambert)
}

pub fn render(scene: &Scene, sensor: &SensorModel) -> RenderResult {
    let intr = &sensor.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let mut depth = DepthImage::zeros(w, h);
    let mut color = ColorImage::black(w, h);
    let mut mask = BinaryMask::empty(w, h);
    let caster = Caster::new(scene);
    let origin = sensor.pose.translation;
    let rot = sensor.pose.rotation;
    let cap = scene.background_depth_cap;
    for v in 0..h {
        for u in 0..w {
            let dc = Vec3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
            let d = rot * dc;
            let Some(hit) = caster.cast(&origin, &d) else { continue };
            if hit.t > cap {
                continue;
            }
            let raw = (hit.t / intr.depth_scale).round();
            if !(1.0..=65535.0).contains(&raw) {
                continue;
            }
            depth.set(u, v, raw as u16);
            let prim = caster.prims[hit.primitive].prim;
            let c = shade(&prim.albedo_at(&hit.local_point), &hit.normal);
            color.set_pixel(u, v, to_u8(&c));
            if prim.label == Label::Target {
                mask.set(u, v, true);
            }
        }
    }
    RenderResult { depth, color, oracle_mask: mask }
}

fn to_u8(c: &Rgb) -> [u8; 3] {
    [0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Mixes a base seed with stream identifiers into an independent seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian range noise with σ(z) plus independent baseline dropout.
pub fn apply_tof_noise(depth: &DepthImage, model: &SensorModel, seed: u64) -> DepthImage {
    let mut rng = rng_for(seed);
    let scale = model.intrinsics.depth_scale;
    let mut out = depth.clone();
    for raw in out.data.iter_mut() {
        if *raw == 0 {
            continue;
        }
        let n: f64 = rng.sample(StandardNormal);
        let drop: f64 = rng.random();
        if drop < model.dropout {
            *raw = 0;
            continue;
        }
        let z = *raw as f64 * scale;
        let noisy = z + model.sigma(z) * n;
        *raw = (noisy / scale).round().clamp(1.0, 65535.0) as u16;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceModel {
    /// Corruption probability contributed by each interferer.
    pub p_int: f64,
    /// Share of corrupted pixels that drop out; the rest get spurious ranges.
    pub dropout_share: f64,
    pub spurious_min_m: f64,
    pub spurious_max_m: f64,
}

impl Default for InterferenceModel {
    fn default() -> Self {
        InterferenceModel { p_int: 0.45, dropout_share: 0.7, spurious_min_m: 0.3, spurious_max_m: 6.0 }
    }
}

impl InterferenceModel {
    pub fn with_p_int(p_int: f64) -> Self {
        InterferenceModel { p_int, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.p_int) || !(0.0..=1.0).contains(&self.dropout_share) {
            return Err(SimError::InvalidInterference("probabilities must lie in [0,1]".into()));
        }
        if !(self.spurious_min_m > 0.0 && self.spurious_max_m >= self.spurious_min_m) {
            return Err(SimError::InvalidInterference("spurious range must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn corruption_probability(&self, interferer_count: u32) -> f64 {
        1.0 - (1.0 - self.p_int).powi(interferer_count as i32)
    }
}

/// Result of [`apply_interference_counted`].
#[derive(Debug, Clone, PartialEq)]
pub struct Interfered {
    pub depth: DepthImage,
    pub corrupted: usize,
    pub valid_before: usize,
}

pub fn apply_interference(
    depth: &DepthImage,
    interferer_count: u32,
    model: &InterferenceModel,
    depth_scale: f64,
    seed: u64,
) -> DepthImage {
    apply_interference_counted(depth, interferer_count, model, depth_scale, seed).depth
}

/// Three uniforms are drawn per valid pixel regardless of the outcome, so
/// for a fixed seed the corrupted set only grows with `interferer_count`.
pub fn apply_interference_counted(
    depth: &DepthImage,
    interferer_count: u32,
    model: &InterferenceModel,
    depth_scale: f64,
    seed: u64,
) -> Interfered {
    let mut out = depth.clone();
    let valid_before = depth.valid_count();
    if interferer_count == 0 {
        return Interfered { depth: out, corrupted: 0, valid_before };
    }
    let prob = model.corruption_probability(interferer_count);
    let mut rng = rng_for(seed);
    let mut corrupted = 0;
    for raw in out.data.iter_mut() {
        if *raw == 0 {
            continue;
        }
        let hit: f64 = rng.random();
        let kind: f64 = rng.random();
        let value: f64 = rng.random();
        if hit >= prob {
            continue;
        }
        corrupted += 1;
        if kind < model.dropout_share {
            *raw = 0;
        } else {
            let z = model.spurious_min_m + value * (model.spurious_max_m - model.spurious_min_m);
            *raw = (z / depth_scale).round().clamp(1.0, 65535.0) as u16;
        }
    }
    Interfered { depth: out, corrupted, valid_before }
}
