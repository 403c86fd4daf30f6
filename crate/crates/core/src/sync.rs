//! Daisy-chain capture scheduling and simulated multi-device capture.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::sim::{
    apply_interference_counted, apply_tof_noise, derive_seed, render, InterferenceModel, RenderResult, Scene,
    SensorModel,
};

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("schedule needs at least one device")]
    NoDevices,
    #[error("device id {0} appears more than once")]
    DuplicateDevice(u32),
    #[error("exposure duration must be positive")]
    ZeroExposure,
    #[error("schedule and rig disagree: missing from schedule {missing:?}, unknown to rig {unknown:?}")]
    RigMismatch { missing: Vec<u32>, unknown: Vec<u32> },
    #[error("{renders} renders supplied for a rig of {devices} devices")]
    RenderCount { renders: usize, devices: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureSchedule {
    pub device_order: Vec<u32>,
    pub delay_us: u64,
    pub exposure_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureWindow {
    pub device: u32,
    pub start_us: u64,
    pub end_us: u64,
}

impl ExposureWindow {
    /// Half-open interval intersection.
    pub fn overlaps(&self, other: &ExposureWindow) -> bool {
        self.start_us < other.end_us && other.start_us < self.end_us
    }
}

pub const DEFAULT_DELAY_US: u64 = 160;
pub const DEFAULT_EXPOSURE_US: u64 = 125;

pub fn build_schedule(device_ids: &[u32], delay_us: u64, exposure_us: u64) -> Result<CaptureSchedule, SyncError> {
    if device_ids.is_empty() {
        return Err(SyncError::NoDevices);
    }
    if exposure_us == 0 {
        return Err(SyncError::ZeroExposure);
    }
    let mut seen = BTreeSet::new();
    for &id in device_ids {
        if !seen.insert(id) {
            return Err(SyncError::DuplicateDevice(id));
        }
    }
    Ok(CaptureSchedule { device_order: device_ids.to_vec(), delay_us, exposure_us })
}

impl CaptureSchedule {
    /// Device `k` in chain order starts `k·delay` after the trigger.
    pub fn windows(&self) -> Vec<ExposureWindow> {
        self.device_order
            .iter()
            .enumerate()
            .map(|(k, &device)| {
                let start_us = k as u64 * self.delay_us;
                ExposureWindow { device, start_us, end_us: start_us + self.exposure_us }
            })
            .collect()
    }
}

/// Unordered pairs with intersecting windows, listed in chain order.
pub fn overlapping_pairs(schedule: &CaptureSchedule) -> Vec<(u32, u32)> {
    let w = schedule.windows();
    let mut pairs = Vec::new();
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            if w[i].overlaps(&w[j]) {
                pairs.push((w[i].device, w[j].device));
            }
        }
    }
    pairs
}

/// Sample points of the target bounds: a `n³` lattice plus the corners.
fn bounds_samples(lo: &Vec3, hi: &Vec3, n: usize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(n * n * n + 8);
    for c in 0..8 {
        out.push(Vec3::new(
            if c & 1 == 0 { lo.x } else { hi.x },
            if c & 2 == 0 { lo.y } else { hi.y },
            if c & 4 == 0 { lo.z } else { hi.z },
        ));
    }
    let t = |i: usize| (i as f64 + 0.5) / n as f64;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                out.push(lo + (hi - lo).component_mul(&Vec3::new(t(i), t(j), t(k))));
            }
        }
    }
    out
}

/// Whether two sensors' frusta share any sample of the target bounds.
pub fn frusta_share_target(a: &SensorModel, b: &SensorModel, scene: &Scene) -> bool {
    let Some((lo, hi)) = scene.target_bounds() else { return false };
    let cap = scene.background_depth_cap;
    bounds_samples(&lo, &hi, 9).iter().any(|p| a.sees_point(p, cap) && b.sees_point(p, cap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionStats {
    pub device_id: u32,
    pub points_before: usize,
    pub points_after: usize,
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceCapture {
    /// Depth after noise and interference; colour and oracle mask from the
    /// clean render.
    pub frame: RenderResult,
    /// Depth after noise only.
    pub noise_only: crate::geometry::DepthImage,
    pub interferers: u32,
    pub corrupted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureResult {
    pub devices: BTreeMap<u32, DeviceCapture>,
    /// Pairs that overlap in time and share a view of the target.
    pub interfering_pairs: Vec<(u32, u32)>,
    pub retention: Vec<RetentionStats>,
}

impl CaptureResult {
    pub fn mean_retention(&self) -> f64 {
        self.retention.iter().map(|r| r.retention).sum::<f64>() / self.retention.len().max(1) as f64
    }

    /// Retained over baseline target pixels, pooled across devices.
    pub fn pooled_retention(&self) -> f64 {
        let before: usize = self.retention.iter().map(|r| r.points_before).sum();
        let after: usize = self.retention.iter().map(|r| r.points_after).sum();
        if before == 0 {
            1.0
        } else {
            after as f64 / before as f64
        }
    }
}

const NOISE_STREAM: u64 = 1;
const INTERFERENCE_STREAM: u64 = 2;

pub fn noise_seed(seed: u64, sensor: &SensorModel) -> u64 {
    derive_seed(seed, &[sensor.id as u64, sensor.seed, NOISE_STREAM])
}

pub fn interference_seed(seed: u64, sensor: &SensorModel) -> u64 {
    derive_seed(seed, &[sensor.id as u64, sensor.seed, INTERFERENCE_STREAM])
}

fn check_rig(rig: &[SensorModel], schedule: &CaptureSchedule) -> Result<(), SyncError> {
    if rig.is_empty() {
        return Err(SyncError::NoDevices);
    }
    let rig_ids: BTreeSet<u32> = rig.iter().map(|s| s.id).collect();
    if rig_ids.len() != rig.len() {
        let mut seen = BTreeSet::new();
        let dup = rig.iter().find(|s| !seen.insert(s.id)).map(|s| s.id).unwrap_or_default();
        return Err(SyncError::DuplicateDevice(dup));
    }
    let sched_ids: BTreeSet<u32> = schedule.device_order.iter().copied().collect();
    if rig_ids != sched_ids {
        return Err(SyncError::RigMismatch {
            missing: rig_ids.difference(&sched_ids).copied().collect(),
            unknown: sched_ids.difference(&rig_ids).copied().collect(),
        });
    }
    Ok(())
}

/// Renders every sensor of the rig.
pub fn render_rig(scene: &Scene, rig: &[SensorModel]) -> Vec<RenderResult> {
    rig.iter().map(|s| render(scene, s)).collect()
}

pub fn simulate_capture(
    scene: &Scene,
    rig: &[SensorModel],
    schedule: &CaptureSchedule,
    interference: &InterferenceModel,
    seed: u64,
) -> Result<CaptureResult, SyncError> {
    check_rig(rig, schedule)?;
    let renders = render_rig(scene, rig);
    capture_from_renders(scene, rig, &renders, schedule, interference, seed)
}

/// As [`simulate_capture`] with precomputed clean renders (rendering is
/// deterministic, so experiments sweeping seeds or delays reuse them).
pub fn capture_from_renders(
    scene: &Scene,
    rig: &[SensorModel],
    renders: &[RenderResult],
    schedule: &CaptureSchedule,
    interference: &InterferenceModel,
    seed: u64,
) -> Result<CaptureResult, SyncError> {
    check_rig(rig, schedule)?;
    if renders.len() != rig.len() {
        return Err(SyncError::RenderCount { renders: renders.len(), devices: rig.len() });
    }
    let (interfering_pairs, counts) = interference_report(scene, rig, schedule);
    let mut devices = BTreeMap::new();
    let mut retention = Vec::new();
    for (sensor, clean) in rig.iter().zip(renders) {
        let (capture, stats) = capture_one(scene, sensor, clean, counts[&sensor.id], interference, seed);
        retention.push(stats);
        devices.insert(sensor.id, capture);
    }
    Ok(CaptureResult { devices, interfering_pairs, retention })
}

/// Interfering pairs (temporal overlap and a shared view of the target) and
/// the resulting interferer count per device.
pub fn interference_report(
    scene: &Scene,
    rig: &[SensorModel],
    schedule: &CaptureSchedule,
) -> (Vec<(u32, u32)>, BTreeMap<u32, u32>) {
    let by_id: BTreeMap<u32, &SensorModel> = rig.iter().map(|s| (s.id, s)).collect();
    let pairs: Vec<(u32, u32)> = overlapping_pairs(schedule)
        .into_iter()
        .filter(|(a, b)| match (by_id.get(a), by_id.get(b)) {
            (Some(sa), Some(sb)) => frusta_share_target(sa, sb, scene),
            _ => false,
        })
        .collect();
    let mut counts: BTreeMap<u32, u32> = rig.iter().map(|s| (s.id, 0)).collect();
    for (a, b) in &pairs {
        *counts.get_mut(a).expect("rig id") += 1;
        *counts.get_mut(b).expect("rig id") += 1;
    }
    (pairs, counts)
}

fn capture_one(
    scene: &Scene,
    sensor: &SensorModel,
    clean: &RenderResult,
    interferers: u32,
    interference: &InterferenceModel,
    seed: u64,
) -> (DeviceCapture, RetentionStats) {
    let mut spurious = *interference;
    spurious.spurious_max_m = spurious.spurious_max_m.min(scene.background_depth_cap).max(spurious.spurious_min_m);
    let noisy = apply_tof_noise(&clean.depth, sensor, noise_seed(seed, sensor));
    let hit = apply_interference_counted(
        &noisy,
        interferers,
        &spurious,
        sensor.intrinsics.depth_scale,
        interference_seed(seed, sensor),
    );
    let mask = &clean.oracle_mask;
    let mut before = 0;
    let mut after = 0;
    for (idx, (&b, &a)) in noisy.data.iter().zip(&hit.depth.data).enumerate() {
        if b != 0 && mask.is_foreground_index(idx) {
            before += 1;
            if a == b {
                after += 1;
            }
        }
    }
    let stats = RetentionStats {
        device_id: sensor.id,
        points_before: before,
        points_after: after,
        retention: if before == 0 { 1.0 } else { after as f64 / before as f64 },
    };
    let capture = DeviceCapture {
        frame: RenderResult { depth: hit.depth, color: clean.color.clone(), oracle_mask: clean.oracle_mask.clone() },
        noise_only: noisy,
        interferers,
        corrupted: hit.corrupted,
    };
    (capture, stats)
}

/// Capture of a single device of the rig; identical to that device's entry
/// in [`simulate_capture`] but renders only this sensor.
pub fn capture_device(
    scene: &Scene,
    rig: &[SensorModel],
    schedule: &CaptureSchedule,
    device_id: u32,
    interference: &InterferenceModel,
    seed: u64,
) -> Result<(DeviceCapture, RetentionStats), SyncError> {
    check_rig(rig, schedule)?;
    let sensor = rig.iter().find(|s| s.id == device_id).ok_or(SyncError::RigMismatch {
        missing: vec![],
        unknown: vec![device_id],
    })?;
    let (_, counts) = interference_report(scene, rig, schedule);
    let clean = render(scene, sensor);
    Ok(capture_one(scene, sensor, &clean, counts[&device_id], interference, seed))
}

pub fn write_retention_csv(path: &Path, stats: &[RetentionStats]) -> crate::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use crate::sim::{box_object, ring_rig};

    fn ids(n: u32) -> Vec<u32> {
        (0..n).collect()
    }

    #[test]
    fn start_times_follow_the_chain() {
        let s = build_schedule(&ids(10), 160, 125).unwrap();
        let starts: Vec<u64> = s.windows().iter().map(|w| w.start_us).collect();
        assert_eq!(starts, (0..10).map(|k| 160 * k).collect::<Vec<_>>());
        let z = build_schedule(&ids(4), 0, 125).unwrap();
        assert!(z.windows().windows(2).all(|w| w[0].start_us == w[1].start_us && w[0].end_us == w[1].end_us));
        let one = build_schedule(&[7], 999, 125).unwrap();
        assert_eq!(one.windows(), vec![ExposureWindow { device: 7, start_us: 0, end_us: 125 }]);
    }

    #[test]
    fn schedule_errors() {
        assert!(matches!(build_schedule(&[], 160, 125), Err(SyncError::NoDevices)));
        assert!(matches!(build_schedule(&[1, 2, 1], 160, 125), Err(SyncError::DuplicateDevice(1))));
        assert!(matches!(build_schedule(&[1], 160, 0), Err(SyncError::ZeroExposure)));
    }

    #[test]
    fn overlap_examples() {
        assert!(overlapping_pairs(&build_schedule(&ids(10), 160, 125).unwrap()).is_empty());
        assert_eq!(overlapping_pairs(&build_schedule(&ids(10), 0, 125).unwrap()).len(), 45);
        assert_eq!(overlapping_pairs(&build_schedule(&ids(3), 100, 150).unwrap()), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn no_overlap_when_delay_covers_exposure() {
        for n in 1..=16 {
            for exposure in [1, 50, 125, 160] {
                for delay in [exposure, exposure + 1, 2 * exposure] {
                    let s = build_schedule(&ids(n), delay, exposure).unwrap();
                    assert!(overlapping_pairs(&s).is_empty(), "n={n} delay={delay} exposure={exposure}");
                }
            }
        }
    }

    #[test]
    fn overlap_is_symmetric_and_irreflexive() {
        let s = build_schedule(&[4, 9, 2, 7, 5], 60, 125).unwrap();
        let w = s.windows();
        for a in &w {
            assert!(a.overlaps(a));
            for b in &w {
                assert_eq!(a.overlaps(b), b.overlaps(a));
            }
        }
        for (a, b) in overlapping_pairs(&s) {
            assert_ne!(a, b);
        }
    }

    fn small_rig(n: usize) -> Vec<SensorModel> {
        let intr = CameraIntrinsics::new(60.0, 60.0, 40.0, 30.0, 80, 60).unwrap();
        ring_rig(n, &[20.0], 1.2, Vec3::new(0.0, 0.0, 0.5), intr)
    }

    fn box_scene() -> Scene {
        Scene::new(vec![box_object([0.3, 0.2, 0.25], RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.5)), [0.6, 0.4, 0.3])])
    }

    #[test]
    fn synchronized_capture_equals_render_plus_noise() {
        let rig = small_rig(5);
        let scene = box_scene();
        let s = build_schedule(&ids(5), 160, 125).unwrap();
        let cap = simulate_capture(&scene, &rig, &s, &InterferenceModel::default(), 42).unwrap();
        assert!(cap.interfering_pairs.is_empty());
        for sensor in &rig {
            let expected = apply_tof_noise(&render(&scene, sensor).depth, sensor, noise_seed(42, sensor));
            assert_eq!(cap.devices[&sensor.id].frame.depth, expected);
            assert_eq!(cap.retention[sensor.id as usize].retention, 1.0);
        }
    }

    #[test]
    fn simultaneous_capture_loses_most_points() {
        let rig = small_rig(10);
        let scene = box_scene();
        let s = build_schedule(&ids(10), 0, 125).unwrap();
        let cap = simulate_capture(&scene, &rig, &s, &InterferenceModel::default(), 1).unwrap();
        assert_eq!(cap.interfering_pairs.len(), 45);
        assert!(cap.mean_retention() <= 0.2, "{}", cap.mean_retention());
    }

    #[test]
    fn sensors_facing_away_do_not_interfere() {
        let intr = CameraIntrinsics::new(60.0, 60.0, 40.0, 30.0, 80, 60).unwrap();
        let toward = SensorModel::new(0, intr, RigidTransform::look_at(Vec3::new(1.5, 0.0, 0.5), Vec3::new(0.0, 0.0, 0.5), Vec3::z()));
        let away = SensorModel::new(1, intr, RigidTransform::look_at(Vec3::new(1.5, 0.0, 0.5), Vec3::new(3.0, 0.0, 0.5), Vec3::z()));
        let scene = box_scene();
        assert!(!frusta_share_target(&toward, &away, &scene));
        let s = build_schedule(&[0, 1], 0, 125).unwrap();
        let cap = simulate_capture(&scene, &[toward, away], &s, &InterferenceModel::default(), 3).unwrap();
        assert!(cap.interfering_pairs.is_empty());
    }

    #[test]
    fn single_device_capture_matches_rig_capture() {
        let rig = small_rig(4);
        let scene = box_scene();
        let s = build_schedule(&ids(4), 40, 125).unwrap();
        let cap = simulate_capture(&scene, &rig, &s, &InterferenceModel::default(), 11).unwrap();
        for id in 0..4 {
            let (one, stats) = capture_device(&scene, &rig, &s, id, &InterferenceModel::default(), 11).unwrap();
            assert_eq!(one, cap.devices[&id]);
            assert_eq!(stats, cap.retention[id as usize]);
        }
    }

    #[test]
    fn single_sensor_keeps_everything() {
        let rig = small_rig(1);
        let s = build_schedule(&[0], 0, 125).unwrap();
        let cap = simulate_capture(&box_scene(), &rig, &s, &InterferenceModel::default(), 9).unwrap();
        assert_eq!(cap.retention[0].retention, 1.0);
        assert_eq!(cap.devices[&0].frame.depth, cap.devices[&0].noise_only);
    }

    #[test]
    fn rig_mismatch_is_reported() {
        let rig = small_rig(3);
        let s = build_schedule(&[0, 1, 5], 160, 125).unwrap();
        match simulate_capture(&box_scene(), &rig, &s, &InterferenceModel::default(), 0) {
            Err(SyncError::RigMismatch { missing, unknown }) => {
                assert_eq!(missing, vec![2]);
                assert_eq!(unknown, vec![5]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn retention_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_retention_csv(&path, &[RetentionStats { device_id: 3, points_before: 10, points_after: 4, retention: 0.4 }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("device_id,points_before,points_after,retention\n3,10,4,0.4"));
    }
}
