//! Extrinsic calibration: fiducial initialisation, multi-scale colored ICP
//! and chaining of pairwise results into one frame.
//!
//! Pairwise transforms map the *source* device frame into the *target*
//! device frame. For an edge `(i, j)` of the chain the source is `j` and the
//! target is `i`, so `pose_j = pose_i ∘ edge_ij`.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, Vector6};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Frame, PointCloud, RigidTransform, Vec3};
use crate::sim::{cast_ray, derive_seed, rng_for, Scene, SensorModel, TagModel};
use crate::spatial::{knn_normals, voxel_downsample, KdTree};

#[derive(Debug, thiserror::Error)]
pub enum RegistrationError {
    #[error("degenerate configuration: {correspondences} usable correspondences")]
    Degenerate { correspondences: usize },
    #[error("invalid registration parameters: {0}")]
    InvalidParams(String),
    #[error("clouds must carry colors")]
    MissingColors,
    #[error("{points} points at voxel {voxel} m, need at least {needed}")]
    TooFewPoints { voxel: f64, points: usize, needed: usize },
    #[error("registration diverged (fitness {fitness:.3} at the coarsest scale)")]
    Diverged { init: RigidTransform, fitness: f64 },
    #[error("device {0} has no cloud or pose")]
    MissingDevice(u32),
    #[error("registration chain is empty")]
    EmptyChain,
}

/// Four tag corners in the observing camera frame, ordered as in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiducialObservation {
    pub tag_id: u32,
    pub corners_camera: [Vec3; 4],
    pub sigma: f64,
}

/// Largest angle between a tag normal and the line of sight for detection.
const MAX_VIEW_ANGLE_DEG: f64 = 75.0;
/// Shortest projected tag edge for detection, pixels.
const MIN_TAG_EDGE_PX: f64 = 8.0;

/// Tags of the cube at `cube_pose` detected by `sensor`, with Gaussian
/// corner noise `sigma` (meters, per coordinate). `scene` must contain the
/// cube and is used for occlusion.
pub fn observe_fiducials(
    sensor: &SensorModel,
    scene: &Scene,
    cube_pose: &RigidTransform,
    model: &TagModel,
    sigma: f64,
    seed: u64,
) -> Vec<FiducialObservation> {
    let eye = sensor.pose.translation;
    let to_cam = sensor.pose.inverse();
    let cos_max = MAX_VIEW_ANGLE_DEG.to_radians().cos();
    let mut out = Vec::new();
    for tag in &model.tags {
        let world: [Vec3; 4] = tag.corners.map(|c| cube_pose.apply_point(&c));
        let centre = world.iter().sum::<Vec3>() / 4.0;
        let normal = cube_pose.apply_vector(&tag.normal);
        let view = eye - centre;
        if normal.dot(&view) < cos_max * view.norm() {
            continue;
        }
        if !world.iter().all(|p| sensor.sees_point(p, scene.background_depth_cap)) {
            continue;
        }
        let occluded = world.iter().any(|p| {
            let d = p - eye;
            let dist = d.norm();
            match cast_ray(scene, &eye, &(d / dist)) {
                Some(hit) => hit.t < dist - 1e-4,
                None => true,
            }
        });
        if occluded {
            continue;
        }
        let cam: [Vec3; 4] = world.map(|p| to_cam.apply_point(&p));
        let i = &sensor.intrinsics;
        let px = cam.map(|c| (i.fx * c.x / c.z, i.fy * c.y / c.z));
        let shortest = (0..4)
            .map(|k| {
                let (a, b) = (px[k], px[(k + 1) % 4]);
                (a.0 - b.0).hypot(a.1 - b.1)
            })
            .fold(f64::INFINITY, f64::min);
        if shortest < MIN_TAG_EDGE_PX {
            continue;
        }
        let mut rng = rng_for(derive_seed(seed, &[sensor.id as u64, tag.id as u64]));
        let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        let corners_camera = cam.map(|c| {
            if sigma > 0.0 {
                c + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                c
            }
        });
        out.push(FiducialObservation { tag_id: tag.id, corners_camera, sigma });
    }
    out
}

/// Least-squares rigid transform with `dst ≈ R·src + t` (no scale).
pub fn absolute_orientation(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, RegistrationError> {
    assert_eq!(src.len(), dst.len(), "correspondence lists differ in length");
    let n = src.len();
    if n < 3 {
        return Err(RegistrationError::Degenerate { correspondences: n });
    }
    let cs = src.iter().sum::<Vec3>() / n as f64;
    let cd = dst.iter().sum::<Vec3>() / n as f64;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - cs, d - cd);
        h += a * b.transpose();
        spread += a * a.transpose();
    }
    // collinear (or coincident) sources leave the rotation about their line free
    let sv = spread.symmetric_eigenvalues();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(f64::total_cmp);
    if sorted[2] <= 0.0 || sorted[1] <= 1e-12 * sorted[2] {
        return Err(RegistrationError::Degenerate { correspondences: n });
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform { rotation, translation: cd - rotation * cs })
}

/// Model-to-camera pose of the cube from the tags one camera detected.
/// Unknown tag ids are ignored; correspondences are sorted so the result
/// does not depend on observation order.
pub fn estimate_cube_pose(obs: &[FiducialObservation], model: &TagModel) -> Result<RigidTransform, RegistrationError> {
    let corners = model.corner_map();
    let mut pairs: Vec<(u32, usize, Vec3, Vec3)> = Vec::new();
    for o in obs {
        if let Some(m) = corners.get(&o.tag_id) {
            for k in 0..4 {
                pairs.push((o.tag_id, k, m[k], o.corners_camera[k]));
            }
        }
    }
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let src: Vec<Vec3> = pairs.iter().map(|p| p.2).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|p| p.3).collect();
    absolute_orientation(&src, &dst)
}

/// Transform taking camera-`b` coordinates into camera `a`, through each
/// camera's estimate of the cube pose.
pub fn estimate_pose_from_fiducials(
    obs_a: &[FiducialObservation],
    obs_b: &[FiducialObservation],
    model: &TagModel,
) -> Result<RigidTransform, RegistrationError> {
    let pa = estimate_cube_pose(obs_a, model)?;
    let pb = estimate_cube_pose(obs_b, model)?;
    Ok(pa.compose(&pb.inverse()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleParams {
    pub voxel_sizes: Vec<f64>,
    pub max_iterations: Vec<usize>,
    /// Weight of the geometric term; `1 − delta` weighs the color term.
    pub delta: f64,
    pub relative_threshold: f64,
    /// Per-scale correspondence radius; `None` means twice the voxel size.
    pub max_correspondence: Option<Vec<f64>>,
    pub normal_neighbours: usize,
}

impl Default for MultiScaleParams {
    fn default() -> Self {
        MultiScaleParams {
            voxel_sizes: vec![0.04, 0.02, 0.01],
            max_iterations: vec![50, 30, 14],
            delta: 0.968,
            relative_threshold: 1e-6,
            max_correspondence: None,
            normal_neighbours: 30,
        }
    }
}

impl MultiScaleParams {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: &str| Err(RegistrationError::InvalidParams(m.to_string()));
        if self.voxel_sizes.is_empty() {
            return bad("no scales");
        }
        if self.voxel_sizes.len() != self.max_iterations.len() {
            return bad("voxel and iteration lists differ in length");
        }
        if self.voxel_sizes.iter().any(|v| !(*v > 0.0)) {
            return bad("voxel sizes must be positive");
        }
        if self.voxel_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return bad("voxel sizes must be strictly descending");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if let Some(d) = &self.max_correspondence {
            if d.len() != self.voxel_sizes.len() || d.iter().any(|v| !(*v > 0.0)) {
                return bad("correspondence radii must be positive, one per scale");
            }
        }
        if self.normal_neighbours < 3 {
            return bad("normal estimation needs at least 3 neighbours");
        }
        Ok(())
    }

    pub fn correspondence_distance(&self, scale: usize) -> f64 {
        match &self.max_correspondence {
            Some(d) => d[scale],
            None => 2.0 * self.voxel_sizes[scale],
        }
    }

    pub fn finest_voxel(&self) -> f64 {
        *self.voxel_sizes.last().expect("validated")
    }
}

/// Target point with its tangent plane and linearised intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPlane {
    pub point: Vec3,
    pub normal: Vec3,
    pub intensity: f64,
    /// Intensity gradient within the tangent plane (`gradient · normal = 0`).
    pub gradient: Vec3,
}

/// `(r_geo, r_col)` of a source point moved by `t`.
pub fn residuals(plane: &TargetPlane, source: &Vec3, source_intensity: f64, t: &RigidTransform) -> [f64; 2] {
    let q = t.apply_point(source);
    let d = q - plane.point;
    [d.dot(&plane.normal), plane.intensity + plane.gradient.dot(&d) - source_intensity]
}

/// Jacobians of [`residuals`] with respect to a left increment `(ω, v)`
/// applied as `increment(ξ) ∘ t`, evaluated at `ξ = 0`.
pub fn jacobians(plane: &TargetPlane, source: &Vec3, t: &RigidTransform) -> [[f64; 6]; 2] {
    let q = t.apply_point(source);
    let row = |g: &Vec3| {
        let w = q.cross(g);
        [w.x, w.y, w.z, g.x, g.y, g.z]
    };
    [row(&plane.normal), row(&plane.gradient)]
}

/// Rigid motion for a twist-like increment `(ω, v)`.
pub fn increment(xi: &[f64; 6]) -> RigidTransform {
    RigidTransform::from_rotation_vector(Vec3::new(xi[0], xi[1], xi[2]), Vec3::new(xi[3], xi[4], xi[5]))
}

fn intensity(c: &Vec3) -> f64 {
    (c.x + c.y + c.z) / 3.0
}

struct Target {
    planes: Vec<TargetPlane>,
    tree: KdTree,
}

fn prepare_target(cloud: &PointCloud, k: usize) -> Target {
    let points = &cloud.points;
    let colors = cloud.colors.as_ref().expect("checked by caller");
    let tree = KdTree::new(points);
    let normals = knn_normals(points, &tree, k);
    let planes = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let (p, n) = (points[i], normals[i]);
            let ci = intensity(&colors[i]);
            let nn = tree.knn(&p, k);
            let mut ata = Matrix3::zeros();
            let mut atb = Vec3::zeros();
            for &(j, _) in &nn {
                if j == i {
                    continue;
                }
                let d = points[j] - p;
                let proj = d - n * n.dot(&d);
                ata += proj * proj.transpose();
                atb += proj * (intensity(&colors[j]) - ci);
            }
            // the gradient is constrained to the tangent plane by a heavy row along n
            let w = (nn.len() as f64).max(1.0) * ata.trace().max(1e-12);
            ata += n * n.transpose() * w;
            let gradient = ata.try_inverse().map(|inv| inv * atb).unwrap_or_else(Vec3::zeros);
            let gradient = gradient - n * n.dot(&gradient);
            TargetPlane { point: p, normal: n, intensity: ci, gradient }
        })
        .collect();
    Target { planes, tree }
}

struct Source {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    intensity: Vec<f64>,
}

/// Pairs whose (unoriented) normals differ by more than 45° are not
/// correspondences; this keeps points on faces the target never saw from
/// snapping onto an adjacent face.
const NORMAL_COMPATIBILITY: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Share of the correspondence distance that admits a point to the frozen overlap.
const FREEZE_FRACTION: f64 = 0.5;

/// Per-point evaluation at `t`: correspondence and weighted cost.
struct Evaluation {
    objective: f64,
    matches: Vec<Option<usize>>,
    inliers: usize,
    sq_dist: f64,
}

struct Problem<'a> {
    source: &'a Source,
    target: &'a Target,
    max_dist: f64,
    delta: f64,
    cap: f64,
    /// Source points that carry cost; empty means all of them.
    active: Vec<bool>,
}

impl Problem<'_> {
    fn is_active(&self, i: usize) -> bool {
        self.active.get(i).copied().unwrap_or(true)
    }

    /// Fix the cost-carrying set to the points corresponded at `t` within
    /// half the correspondence distance. Pairs near the cutoff at the start
    /// of a scale are mostly between surfaces that do not overlap.
    fn freeze_overlap(&mut self, t: &RigidTransform) {
        let full = self.max_dist;
        self.max_dist = FREEZE_FRACTION * full;
        self.active = Vec::new();
        self.active = self.evaluate(t).matches.iter().map(Option::is_some).collect();
        self.max_dist = full;
    }

    /// Mean truncated cost over the active points: a corresponded point pays
    /// its weighted residuals up to `cap`, an unmatched one pays `cap`.
    /// Inactive points only count towards fitness, so neither growing nor
    /// shrinking the overlap lowers the objective by itself. With no active
    /// point the objective is `cap`.
    fn evaluate(&self, t: &RigidTransform) -> Evaluation {
        let per_point: Vec<(Option<usize>, f64, f64)> = (0..self.source.points.len())
            .into_par_iter()
            .map(|i| {
                let s = &self.source.points[i];
                let q = t.apply_point(s);
                let n = t.rotation * self.source.normals[i];
                match self.target.tree.nearest_within(&q, self.max_dist) {
                    Some((j, d2)) if self.target.planes[j].normal.dot(&n).abs() >= NORMAL_COMPATIBILITY => {
                        let [rg, rc] = residuals(&self.target.planes[j], s, self.source.intensity[i], t);
                        let c = self.delta * rg * rg + (1.0 - self.delta) * rc * rc;
                        (Some(j), c.min(self.cap), d2)
                    }
                    _ => (None, 0.0, 0.0),
                }
            })
            .collect();
        let mut e = Evaluation { objective: 0.0, matches: Vec::with_capacity(per_point.len()), inliers: 0, sq_dist: 0.0 };
        let mut active = 0;
        for (i, (m, c, d2)) in per_point.into_iter().enumerate() {
            if self.is_active(i) {
                active += 1;
                e.objective += if m.is_some() { c } else { self.cap };
            }
            if m.is_some() {
                e.inliers += 1;
                e.sq_dist += d2;
            }
            e.matches.push(m);
        }
        e.objective = if active > 0 { e.objective / active as f64 } else { self.cap };
        e
    }

    fn normal_equations(&self, t: &RigidTransform, eval: &Evaluation) -> (Matrix6<f64>, Vector6<f64>) {
        let (wg, wc) = (self.delta, 1.0 - self.delta);
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (i, m) in eval.matches.iter().enumerate() {
            let Some(j) = *m else { continue };
            if !self.is_active(i) {
                continue;
            }
            let plane = &self.target.planes[j];
            let s = &self.source.points[i];
            let r = residuals(plane, s, self.source.intensity[i], t);
            if wg * r[0] * r[0] + wc * r[1] * r[1] >= self.cap {
                continue;
            }
            let jac = jacobians(plane, s, t);
            for (k, w) in [(0, wg), (1, wc)] {
                if w == 0.0 {
                    continue;
                }
                let jr = Vector6::from_row_slice(&jac[k]);
                jtj += jr * jr.transpose() * w;
                jtr += jr * (r[k] * w);
            }
        }
        (jtj, jtr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrace {
    pub voxel: f64,
    /// Objective after each accepted iteration, starting with the initial value.
    pub objective: Vec<f64>,
    pub rejected_steps: usize,
    pub source_points: usize,
    pub target_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// RMS distance of corresponded points at the finest scale.
    pub rmse: f64,
    /// Fraction of source points with a correspondence at the finest scale.
    pub fitness: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scales: Vec<ScaleTrace>,
}

/// Fitness below this at the coarsest scale counts as divergence.
pub const DIVERGENCE_FITNESS: f64 = 0.1;

const MAX_DAMPING_TRIES: usize = 10;

fn downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    voxel_downsample(cloud, voxel)
}

/// Multi-scale colored ICP aligning `source` onto `target`.
pub fn colored_icp(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &MultiScaleParams,
) -> Result<RegistrationResult, RegistrationError> {
    params.validate()?;
    if source.colors.is_none() || target.colors.is_none() {
        return Err(RegistrationError::MissingColors);
    }
    let mut t = *init;
    let mut traces = Vec::new();
    let mut last = (0.0, 0.0);
    for (scale, &voxel) in params.voxel_sizes.iter().enumerate() {
        let src = downsample(source, voxel);
        let tgt = downsample(target, voxel);
        let needed = params.normal_neighbours.max(3);
        if tgt.len() < needed || src.len() < needed {
            return Err(RegistrationError::TooFewPoints { voxel, points: tgt.len().min(src.len()), needed });
        }
        let target_model = prepare_target(&tgt, params.normal_neighbours);
        let source_tree = KdTree::new(&src.points);
        let source_model = Source {
            intensity: src.colors.as_ref().expect("checked").iter().map(intensity).collect(),
            normals: knn_normals(&src.points, &source_tree, params.normal_neighbours),
            points: src.points,
        };
        let max_dist = params.correspondence_distance(scale);
        let mut problem = Problem {
            source: &source_model,
            target: &target_model,
            max_dist,
            delta: params.delta,
            cap: params.delta * max_dist * max_dist + (1.0 - params.delta) * 0.25,
            active: Vec::new(),
        };
        problem.freeze_overlap(&t);
        let mut eval = problem.evaluate(&t);
        if scale == 0 {
            let fitness = eval.inliers as f64 / source_model.points.len() as f64;
            if fitness < DIVERGENCE_FITNESS {
                return Err(RegistrationError::Diverged { init: *init, fitness });
            }
        }
        let mut trace = ScaleTrace {
            voxel,
            objective: vec![eval.objective],
            rejected_steps: 0,
            source_points: source_model.points.len(),
            target_points: target_model.planes.len(),
        };
        for _ in 0..params.max_iterations[scale] {
            if eval.objective <= 0.0 || eval.inliers == 0 {
                break;
            }
            let (jtj, jtr) = problem.normal_equations(&t, &eval);
            let scale_diag = jtj.trace() / 6.0;
            let mut lambda = 0.0;
            let mut accepted = None;
            for _ in 0..MAX_DAMPING_TRIES {
                let mut a = jtj;
                for d in 0..6 {
                    a[(d, d)] += lambda * jtj[(d, d)].max(1e-9 * scale_diag) + 1e-12 * scale_diag;
                }
                let Some(chol) = a.cholesky() else {
                    lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
                    continue;
                };
                let step = chol.solve(&(-jtr));
                if step.iter().all(|v| *v == 0.0) {
                    break;
                }
                let xi = [step[0], step[1], step[2], step[3], step[4], step[5]];
                let candidate = increment(&xi).compose(&t).orthonormalized();
                let next = problem.evaluate(&candidate);
                if next.objective <= eval.objective {
                    accepted = Some((candidate, next));
                    break;
                }
                trace.rejected_steps += 1;
                lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            }
            let Some((candidate, next)) = accepted else { break };
            let change = (eval.objective - next.objective) / eval.objective.max(f64::MIN_POSITIVE);
            t = candidate;
            eval = next;
            trace.objective.push(eval.objective);
            if change < params.relative_threshold {
                break;
            }
        }
        last = (
            eval.inliers as f64 / source_model.points.len() as f64,
            if eval.inliers > 0 { (eval.sq_dist / eval.inliers as f64).sqrt() } else { 0.0 },
        );
        traces.push(trace);
    }
    Ok(RegistrationResult { transform: t, rmse: last.1, fitness: last.0, scales: traces })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEdge {
    pub from: u32,
    pub to: u32,
    #[serde(flatten)]
    pub result: RegistrationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedEdge {
    pub from: u32,
    pub to: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub reference: u32,
    pub edges: Vec<PoseEdge>,
    pub failed: Vec<FailedEdge>,
    /// Device frame to reference frame.
    pub poses: BTreeMap<u32, RigidTransform>,
}

impl PoseGraph {
    pub fn edge(&self, from: u32, to: u32) -> Option<&RegistrationResult> {
        self.edges.iter().find(|e| e.from == from && e.to == to).map(|e| &e.result)
    }

    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Registers consecutive devices of `chain` (the first is the reference)
/// and composes the edges into poses in the reference frame.
pub fn register_rig(
    clouds: &BTreeMap<u32, PointCloud>,
    fiducials: &BTreeMap<u32, Vec<FiducialObservation>>,
    model: &TagModel,
    chain: &[u32],
    params: &MultiScaleParams,
) -> Result<PoseGraph, RegistrationError> {
    params.validate()?;
    let &reference = chain.first().ok_or(RegistrationError::EmptyChain)?;
    for id in chain {
        if !clouds.contains_key(id) {
            return Err(RegistrationError::MissingDevice(*id));
        }
    }
    let outcomes: Vec<(u32, u32, Result<RegistrationResult, String>)> = chain
        .par_windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let no_obs = Vec::new();
            let init = estimate_pose_from_fiducials(
                fiducials.get(&a).unwrap_or(&no_obs),
                fiducials.get(&b).unwrap_or(&no_obs),
                model,
            );
            let result = init
                .map_err(|e| format!("fiducial initialisation: {e}"))
                .and_then(|init| colored_icp(&clouds[&b], &clouds[&a], &init, params).map_err(|e| e.to_string()));
            (a, b, result)
        })
        .collect();
    let mut graph = PoseGraph { reference, edges: Vec::new(), failed: Vec::new(), poses: BTreeMap::new() };
    graph.poses.insert(reference, RigidTransform::identity());
    let mut reachable = true;
    for (a, b, outcome) in outcomes {
        match outcome {
            Ok(result) => {
                if reachable {
                    let pose = graph.poses[&a].compose(&result.transform);
                    graph.poses.insert(b, pose);
                }
                graph.edges.push(PoseEdge { from: a, to: b, result });
            }
            Err(reason) => {
                log::warn!("edge {a}->{b} failed: {reason}");
                reachable = false;
                graph.failed.push(FailedEdge { from: a, to: b, reason });
            }
        }
    }
    Ok(graph)
}

/// All clouds moved into the reference frame and concatenated, optionally
/// deduplicated on a voxel grid.
pub fn merge_clouds(
    clouds: &BTreeMap<u32, PointCloud>,
    graph: &PoseGraph,
    dedup_voxel: Option<f64>,
) -> Result<PointCloud, RegistrationError> {
    let mut merged = PointCloud::default().with_frame(Frame::World);
    for (id, cloud) in clouds {
        let pose = graph.poses.get(id).ok_or(RegistrationError::MissingDevice(*id))?;
        merged.append(&cloud.transformed(pose, Frame::World));
    }
    merged.frame = Frame::World;
    Ok(match dedup_voxel {
        Some(v) => voxel_downsample(&merged, v),
        None => merged,
    })
}
