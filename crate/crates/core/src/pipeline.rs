//! End-to-end scan: capture, segmentation, back-projection, registration,
//! reconstruction and measurement, with every intermediate optionally
//! persisted to a session directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::experiment::ReportRow;
use crate::geometry::{back_project, Frame, PointCloud, RigidTransform, Vec3};
use crate::io;
use crate::measure::{box_reference, cylinder_reference, measure, MeshMeasurements};
use crate::recon::{estimate_normals, poisson_reconstruct, PoissonParams, TriangleMesh};
use crate::registration::{merge_clouds, observe_fiducials, register_rig, FiducialObservation, MultiScaleParams, PoseGraph};
use crate::segmentation::{apply_mask_to_depth, fuse, gt_mask_path, load_masks, save_mask_pair, ArbitrationMode, BinaryMask, MaskPair};
use crate::sim::{
    box_object, cylinder_object, eight_sensor_chute_rig, make_animal_model, make_calibration_cube, ten_sensor_rod_rig,
    InterferenceModel, Label, Scene, ScenePrimitive, SensorModel, Shape, TagModel,
};
use crate::spatial::{radius_inliers, voxel_downsample};
use crate::sync::{build_schedule, simulate_capture, CaptureResult, RetentionStats, DEFAULT_DELAY_US, DEFAULT_EXPOSURE_US};

/// What is being scanned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SceneSpec {
    Cylinder { radius: f64, height: f64 },
    Box { dims: [f64; 3] },
    /// Synthetic animal standing in its chute.
    Animal { scale: f64 },
    File { path: PathBuf },
    Inline { scene: Scene },
}

impl SceneSpec {
    pub fn object_id(&self) -> String {
        match self {
            SceneSpec::Cylinder { radius, height } => format!("cylinder_r{radius}_h{height}"),
            SceneSpec::Box { dims: [a, b, c] } => format!("box_{a}x{b}x{c}"),
            SceneSpec::Animal { scale } => format!("animal_s{scale}"),
            SceneSpec::File { path } => path.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned()),
            SceneSpec::Inline { .. } => "scene".into(),
        }
    }

    /// Closed-form reference for the analytic objects.
    pub fn analytic_reference(&self) -> Option<MeshMeasurements> {
        match self {
            SceneSpec::Cylinder { radius, height } => Some(cylinder_reference(*radius, *height)),
            SceneSpec::Box { dims } => Some(box_reference(*dims)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RigSpec {
    /// Five rods with an upper and a lower sensor each, around the origin.
    TenRod { radius: f64 },
    /// Eight sensors around the animal chute.
    Chute { scale: f64 },
    File { path: PathBuf },
    Inline { sensors: Vec<SensorModel> },
}

impl RigSpec {
    /// Calibration cube edge and pose suited to this rig.
    fn default_cube(&self) -> (f64, RigidTransform) {
        match self {
            RigSpec::Chute { scale } => (
                0.5 * scale,
                RigidTransform::from_axis_angle(Vec3::z(), 0.4, Vec3::new(0.35, 0.0, 1.0) * *scale),
            ),
            _ => (0.3, RigidTransform::from_axis_angle(Vec3::z(), 0.4, Vec3::zeros())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskSource {
    /// Labels straight from the renderer; the depth vote also requires a
    /// valid return.
    Oracle,
    /// `<device>_rgbmask.pgm` and `<device>_depthmask.pgm` in a directory.
    Files { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierFilter {
    pub radius: f64,
    pub min_neighbours: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub cube_edge: f64,
    pub cube_pose: RigidTransform,
    /// Per-coordinate corner noise, meters.
    pub corner_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    /// Applied to the target primitives of analytic objects.
    pub object_pose: RigidTransform,
    /// Adds two low chute walls beside an analytic object.
    pub chute_walls: bool,
    pub rig: RigSpec,
    /// Registration order; defaults to rig order. The first is the reference.
    pub chain: Option<Vec<u32>>,
    pub delay_us: u64,
    pub exposure_us: u64,
    pub seed: u64,
    pub interference: InterferenceModel,
    pub noiseless: bool,
    pub masks: MaskSource,
    pub arbitration: ArbitrationMode,
    pub outliers: Option<OutlierFilter>,
    /// Defaults to the rig's cube.
    pub calibration: Option<Calibration>,
    pub registration: MultiScaleParams,
    /// Deduplication voxel for the merged cloud; `None` skips it.
    pub merge_voxel: Option<f64>,
    pub normal_neighbours: usize,
    pub poisson: PoissonParams,
    pub session_dir: Option<PathBuf>,
    /// Overrides the analytic reference in the session report.
    pub reference: Option<MeshMeasurements>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec::Animal { scale: 1.0 },
            object_pose: RigidTransform::identity(),
            chute_walls: false,
            rig: RigSpec::Chute { scale: 1.0 },
            chain: None,
            delay_us: DEFAULT_DELAY_US,
            exposure_us: DEFAULT_EXPOSURE_US,
            seed: 0,
            interference: InterferenceModel::default(),
            noiseless: false,
            masks: MaskSource::Oracle,
            arbitration: ArbitrationMode::OneVoteOr,
            outliers: Some(OutlierFilter { radius: 0.02, min_neighbours: 4 }),
            calibration: None,
            registration: MultiScaleParams::default(),
            merge_voxel: Some(0.005),
            normal_neighbours: 16,
            poisson: PoissonParams::default(),
            session_dir: None,
            reference: None,
        }
    }
}

impl RunConfig {
    /// Desk-scale known object on the ten-sensor rod rig.
    pub fn known_object(scene: SceneSpec, object_pose: RigidTransform) -> Self {
        RunConfig {
            scene,
            object_pose,
            rig: RigSpec::TenRod { radius: 0.9 },
            outliers: Some(OutlierFilter { radius: 0.008, min_neighbours: 4 }),
            registration: MultiScaleParams {
                voxel_sizes: vec![0.02, 0.01, 0.005],
                max_iterations: vec![50, 30, 14],
                ..MultiScaleParams::default()
            },
            merge_voxel: Some(0.002),
            ..RunConfig::default()
        }
    }

    /// Synthetic animal in the chute at `scale`.
    pub fn animal(scale: f64) -> Self {
        RunConfig {
            scene: SceneSpec::Animal { scale },
            rig: RigSpec::Chute { scale },
            outliers: Some(OutlierFilter { radius: 0.02 * scale, min_neighbours: 4 }),
            registration: MultiScaleParams {
                voxel_sizes: [0.04, 0.02, 0.01].map(|v| v * scale).to_vec(),
                ..MultiScaleParams::default()
            },
            merge_voxel: Some(0.005 * scale),
            poisson: PoissonParams::with_resolution(192),
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        io::read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let SceneSpec::File { path } = &self.scene {
            if !path.is_file() {
                return bad(format!("scene file {} not found", path.display()));
            }
        }
        if let RigSpec::File { path } = &self.rig {
            if !path.is_file() {
                return bad(format!("rig file {} not found", path.display()));
            }
        }
        if let MaskSource::Files { dir } = &self.masks {
            if !dir.is_dir() {
                return bad(format!("mask directory {} not found", dir.display()));
            }
        }
        if self.exposure_us == 0 {
            return bad("exposure must be positive".into());
        }
        if self.normal_neighbours < 3 {
            return bad("normal estimation needs at least 3 neighbours".into());
        }
        if let Some(v) = self.merge_voxel {
            if !(v > 0.0) {
                return bad("merge voxel must be positive".into());
            }
        }
        self.interference.validate()?;
        self.registration.validate()?;
        Ok(())
    }

    pub fn build_scene(&self) -> Result<Scene> {
        let paint = [0.75, 0.55, 0.35];
        let mut scene = match &self.scene {
            SceneSpec::Cylinder { radius, height } => Scene::new(vec![cylinder_object(*radius, *height, self.object_pose, paint)]),
            SceneSpec::Box { dims } => Scene::new(vec![box_object(*dims, self.object_pose, paint)]),
            SceneSpec::Animal { scale } => make_animal_model(*scale),
            SceneSpec::File { path } => Scene::load(path)?,
            SceneSpec::Inline { scene } => scene.clone(),
        };
        if self.chute_walls {
            let (lo, hi) = scene.target_bounds().ok_or_else(|| Error::Config("scene has no target".into()))?;
            let centre = (lo + hi) / 2.0;
            let length = (hi.x - lo.x) + 0.3;
            for side in [-1.0, 1.0] {
                let y = if side < 0.0 { lo.y - 0.08 } else { hi.y + 0.08 };
                scene.primitives.push(ScenePrimitive::new(
                    Shape::Box { half_extents: [length / 2.0, 0.01, 0.04] },
                    RigidTransform::from_translation(Vec3::new(centre.x, y, centre.z)),
                    [0.5, 0.5, 0.55],
                    Label::Chute,
                ));
            }
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn build_rig(&self) -> Result<Vec<SensorModel>> {
        let mut rig = match &self.rig {
            RigSpec::TenRod { radius } => ten_sensor_rod_rig(Vec3::zeros(), *radius),
            RigSpec::Chute { scale } => eight_sensor_chute_rig(*scale),
            RigSpec::File { path } => SensorModel::load_rig(path)?,
            RigSpec::Inline { sensors } => sensors.clone(),
        };
        if self.noiseless {
            rig = rig.into_iter().map(SensorModel::noiseless).collect();
        }
        for s in &rig {
            s.validate()?;
        }
        Ok(rig)
    }

    pub fn chain(&self, rig: &[SensorModel]) -> Vec<u32> {
        self.chain.clone().unwrap_or_else(|| rig.iter().map(|s| s.id).collect())
    }

    pub fn calibration(&self) -> Calibration {
        self.calibration.clone().unwrap_or_else(|| {
            let (cube_edge, cube_pose) = self.rig.default_cube();
            Calibration { cube_edge, cube_pose, corner_sigma: 0.001 }
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub measurements: MeshMeasurements,
    /// World frame.
    pub mesh: TriangleMesh,
    /// World frame, after deduplication.
    pub merged: PointCloud,
    pub graph: PoseGraph,
    /// Points per device after masking and outlier removal.
    pub device_points: BTreeMap<u32, usize>,
    pub retention: Vec<RetentionStats>,
    pub session_dir: Option<PathBuf>,
}

/// Tag layout and per-device observations of the calibration shot,
/// persisted as `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub model: TagModel,
    pub observations: BTreeMap<u32, Vec<FiducialObservation>>,
}

/// Captures the cube with every sensor and returns the tag observations.
pub fn calibrate(rig: &[SensorModel], calibration: &Calibration, seed: u64) -> CalibrationRecord {
    let (cube, model) = make_calibration_cube(calibration.cube_edge, 1);
    let cube = cube.transformed(&calibration.cube_pose);
    let observations = rig
        .iter()
        .map(|s| (s.id, observe_fiducials(s, &cube, &calibration.cube_pose, &model, calibration.corner_sigma, seed)))
        .collect();
    CalibrationRecord { model, observations }
}

/// Mask pairs from the configured provider.
pub fn masks_for(capture: &CaptureResult, cfg: &RunConfig) -> Result<BTreeMap<u32, MaskPair>> {
    match &cfg.masks {
        MaskSource::Oracle => capture
            .devices
            .iter()
            .map(|(&id, dev)| {
                let rgb = dev.frame.oracle_mask.clone();
                let depth = BinaryMask::from_fn(rgb.width, rgb.height, |u, v| {
                    rgb.is_foreground(u, v) && dev.frame.depth.get(u, v) > 0
                });
                Ok((id, MaskPair::new(rgb, depth)?))
            })
            .collect(),
        MaskSource::Files { dir } => {
            let ids: Vec<u32> = capture.devices.keys().copied().collect();
            Ok(load_masks(dir, &ids)?)
        }
    }
}

/// Segmented, back-projected and outlier-filtered cloud per device, sensor
/// frame.
pub fn device_clouds(
    capture: &CaptureResult,
    fused: &BTreeMap<u32, BinaryMask>,
    rig: &[SensorModel],
    outliers: Option<OutlierFilter>,
) -> Result<BTreeMap<u32, PointCloud>> {
    let mut out = BTreeMap::new();
    for s in rig {
        let dev = capture.devices.get(&s.id).ok_or_else(|| Error::Config(format!("no capture for device {}", s.id)))?;
        let mask = &fused[&s.id];
        let depth = apply_mask_to_depth(&dev.frame.depth, mask)?;
        let mut cloud = back_project(&depth, &s.intrinsics, Some(&dev.frame.color), None)?.with_frame(Frame::Sensor(s.id));
        if let Some(f) = outliers {
            cloud = cloud.select(&radius_inliers(&cloud.points, f.radius, f.min_neighbours));
        }
        out.insert(s.id, cloud);
    }
    Ok(out)
}

/// Runs every stage for one configuration.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate().stage("config")?;
    let scene = cfg.build_scene().stage("config")?;
    let rig = cfg.build_rig().stage("config")?;
    let chain = cfg.chain(&rig);
    let session = match &cfg.session_dir {
        Some(dir) => Some(SessionDir::create(dir).stage("persist")?),
        None => None,
    };

    let ids: Vec<u32> = rig.iter().map(|s| s.id).collect();
    let schedule = build_schedule(&ids, cfg.delay_us, cfg.exposure_us).stage("capture")?;
    let capture = simulate_capture(&scene, &rig, &schedule, &cfg.interference, cfg.seed).stage("capture")?;
    if let Some(s) = &session {
        s.write_raw(&capture).stage("persist")?;
    }

    let pairs = masks_for(&capture, cfg).stage("segmentation")?;
    let mut fused = BTreeMap::new();
    for (id, pair) in &pairs {
        fused.insert(*id, fuse(pair, cfg.arbitration).stage("segmentation")?);
    }
    if let Some(s) = &session {
        s.write_masks(&pairs, &capture).stage("persist")?;
    }
    let clouds = device_clouds(&capture, &fused, &rig, cfg.outliers).stage("back_projection")?;
    let device_points = clouds.iter().map(|(id, c)| (*id, c.len())).collect();

    let calib = calibrate(&rig, &cfg.calibration(), cfg.seed);
    if let Some(s) = &session {
        io::write_json(&s.root.join("calibration.json"), &calib).stage("persist")?;
    }
    let graph = register_rig(&clouds, &calib.observations, &calib.model, &chain, &cfg.registration).stage("registration")?;
    if !graph.is_complete() {
        let reasons: Vec<String> = graph.failed.iter().map(|f| format!("{}->{}: {}", f.from, f.to, f.reason)).collect();
        return Err(Error::Config(format!("registration chain broken ({})", reasons.join("; "))).in_stage("registration"));
    }

    // the reference sensor's installed pose carries the result into the world frame
    let reference = rig.iter().find(|s| s.id == graph.reference).expect("chain ids come from the rig").pose;
    let merged = merge_clouds(&clouds, &graph, None).stage("merge")?;
    let mut sources = Vec::with_capacity(merged.len());
    for (id, c) in &clouds {
        sources.extend(std::iter::repeat_n(*id, c.len()));
    }
    let merged = merged.transformed(&reference, Frame::World);
    let (merged, sources) = match cfg.merge_voxel {
        Some(v) => dedup_with_sources(&merged, &sources, v),
        None => (merged, sources),
    };
    let centres: BTreeMap<u32, Vec3> =
        graph.poses.iter().map(|(id, p)| (*id, reference.compose(p).translation)).collect();
    let oriented = estimate_normals(&merged, &sources, cfg.normal_neighbours, &centres).stage("normals")?;
    let recon = poisson_reconstruct(&oriented, &cfg.poisson).stage("reconstruction")?;
    let measurements = measure(&recon.mesh).stage("measurement")?;

    if let Some(s) = &session {
        s.write_results(&clouds, &oriented.cloud, &graph, &reference, &recon.mesh).stage("persist")?;
        let reference = cfg.reference.or_else(|| cfg.scene.analytic_reference());
        let row = ReportRow::new(&cfg.scene.object_id(), 0, cfg.seed, &measurements, reference.as_ref());
        crate::experiment::write_report_csv(&s.root.join("report.csv"), &[row]).stage("persist")?;
    }

    Ok(PipelineOutput {
        measurements,
        mesh: recon.mesh,
        merged,
        graph,
        device_points,
        retention: capture.retention.clone(),
        session_dir: session.map(|s| s.root),
    })
}

/// Voxel deduplication that keeps, per voxel, the source of the first point.
fn dedup_with_sources(cloud: &PointCloud, sources: &[u32], voxel: f64) -> (PointCloud, Vec<u32>) {
    let reduced = voxel_downsample(cloud, voxel);
    let mut first: BTreeMap<(i64, i64, i64), u32> = BTreeMap::new();
    for (p, s) in cloud.points.iter().zip(sources) {
        first.entry(crate::spatial::voxel_key(p, voxel)).or_insert(*s);
    }
    let reduced_sources = reduced.points.iter().map(|p| first[&crate::spatial::voxel_key(p, voxel)]).collect();
    (reduced, reduced_sources)
}

/// Layout: `raw/`, `masks/`, `clouds/`, `calibration.json`, `poses.json`,
/// `mesh.ply`, `report.csv`.
struct SessionDir {
    root: PathBuf,
}

#[derive(Serialize)]
struct PosesFile<'a> {
    reference: u32,
    /// Sensor-to-world, from the reference sensor's installed pose.
    world: BTreeMap<u32, RigidTransform>,
    graph: &'a PoseGraph,
}

impl SessionDir {
    fn create(root: &Path) -> std::io::Result<SessionDir> {
        for sub in ["raw", "masks", "clouds"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(SessionDir { root: root.to_path_buf() })
    }

    fn write_raw(&self, capture: &CaptureResult) -> Result<()> {
        for (id, dev) in &capture.devices {
            io::write_bytes(&self.root.join(format!("raw/{id}_depth.pgm")), &io::encode_depth_pgm(&dev.frame.depth))?;
            io::write_bytes(&self.root.join(format!("raw/{id}_color.ppm")), &io::encode_ppm(&dev.frame.color))?;
        }
        crate::sync::write_retention_csv(&self.root.join("raw/retention.csv"), &capture.retention)?;
        Ok(())
    }

    fn write_masks(&self, pairs: &BTreeMap<u32, MaskPair>, capture: &CaptureResult) -> Result<()> {
        let dir = self.root.join("masks");
        for (id, pair) in pairs {
            save_mask_pair(&dir, *id, pair)?;
            io::write_bytes(&gt_mask_path(&dir, *id), &io::encode_mask_pgm(&capture.devices[id].frame.oracle_mask))?;
        }
        Ok(())
    }

    fn write_results(
        &self,
        clouds: &BTreeMap<u32, PointCloud>,
        merged: &PointCloud,
        graph: &PoseGraph,
        reference: &RigidTransform,
        mesh: &TriangleMesh,
    ) -> Result<()> {
        for (id, c) in clouds {
            io::write_cloud(&self.root.join(format!("clouds/{id}.ply")), c)?;
        }
        io::write_cloud(&self.root.join("clouds/merged.ply"), merged)?;
        let world = graph.poses.iter().map(|(id, p)| (*id, reference.compose(p))).collect();
        io::write_json(&self.root.join("poses.json"), &PosesFile { reference: graph.reference, world, graph })?;
        io::write_mesh(&self.root.join("mesh.ply"), mesh)?;
        Ok(())
    }
}
