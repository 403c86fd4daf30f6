//! Experiment runners on top of [`run_pipeline`]: repeated known-object
//! scans, the synchronization sweep and the synthetic-animal study.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::measure::{oracle_measurements, percent_error, MeshMeasurements};
use crate::pipeline::{run_pipeline, RunConfig, SceneSpec};
use crate::sim::ScenePrimitive;
use crate::sync::{build_schedule, capture_from_renders, render_rig};

/// Oracle grid spacing for the animal reference, meters.
pub const ANIMAL_ORACLE_SPACING: f64 = 0.002;

/// One line of a report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub object_id: String,
    pub run: usize,
    pub seed: u64,
    pub surface_area_m2: f64,
    pub volume_m3: f64,
    pub ref_area: Option<f64>,
    pub ref_volume: Option<f64>,
    pub pct_err_area: Option<f64>,
    pub pct_err_volume: Option<f64>,
}

impl ReportRow {
    pub fn new(object_id: &str, run: usize, seed: u64, m: &MeshMeasurements, reference: Option<&MeshMeasurements>) -> Self {
        ReportRow {
            object_id: object_id.to_string(),
            run,
            seed,
            surface_area_m2: m.surface_area,
            volume_m3: m.volume,
            ref_area: reference.map(|r| r.surface_area),
            ref_volume: reference.map(|r| r.volume),
            pct_err_area: reference.map(|r| percent_error(m.surface_area, r.surface_area)),
            pct_err_volume: reference.map(|r| percent_error(m.volume, r.volume)),
        }
    }
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub orientation: usize,
    pub measurements: Option<MeshMeasurements>,
    /// Set when the run failed; such runs are excluded from the statistics.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Summary { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Analytic,
    /// Voxelization oracle standing in for hand measurements.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub object_id: String,
    pub runs: Vec<RunRecord>,
    pub reference: MeshMeasurements,
    pub reference_kind: ReferenceKind,
    /// `None` when every run failed.
    pub area: Option<Summary>,
    pub volume: Option<Summary>,
    pub pct_err_area: Option<f64>,
    pub pct_err_volume: Option<f64>,
}

impl ExperimentReport {
    pub fn from_runs(object_id: &str, runs: Vec<RunRecord>, reference: MeshMeasurements, reference_kind: ReferenceKind) -> Self {
        let ok: Vec<&MeshMeasurements> = runs.iter().filter_map(|r| r.measurements.as_ref()).collect();
        let area = Summary::of(&ok.iter().map(|m| m.surface_area).collect::<Vec<_>>());
        let volume = Summary::of(&ok.iter().map(|m| m.volume).collect::<Vec<_>>());
        ExperimentReport {
            object_id: object_id.to_string(),
            pct_err_area: area.map(|s| percent_error(s.mean, reference.surface_area)),
            pct_err_volume: volume.map(|s| percent_error(s.mean, reference.volume)),
            runs,
            reference,
            reference_kind,
            area,
            volume,
        }
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.runs
            .iter()
            .filter_map(|r| r.measurements.as_ref().map(|m| ReportRow::new(&self.object_id, r.run, r.seed, m, Some(&self.reference))))
            .collect()
    }
}

/// One summary line per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub object_id: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_surface_area_m2: Option<f64>,
    pub std_surface_area_m2: Option<f64>,
    pub ref_area: f64,
    pub pct_err_area: Option<f64>,
    pub mean_volume_m3: Option<f64>,
    pub std_volume_m3: Option<f64>,
    pub ref_volume: f64,
    pub pct_err_volume: Option<f64>,
    pub reference: ReferenceKind,
}

impl From<&ExperimentReport> for SummaryRow {
    fn from(r: &ExperimentReport) -> Self {
        SummaryRow {
            object_id: r.object_id.clone(),
            runs: r.runs.len() - r.failed_runs(),
            failed: r.failed_runs(),
            mean_surface_area_m2: r.area.map(|s| s.mean),
            std_surface_area_m2: r.area.map(|s| s.std),
            ref_area: r.reference.surface_area,
            pct_err_area: r.pct_err_area,
            mean_volume_m3: r.volume.map(|s| s.mean),
            std_volume_m3: r.volume.map(|s| s.std),
            ref_volume: r.reference.volume,
            pct_err_volume: r.pct_err_volume,
            reference: r.reference_kind,
        }
    }
}

pub fn write_summary_csv(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(SummaryRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Seed of run `k` derived from the configuration's base seed.
pub fn run_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

fn record(run: usize, seed: u64, orientation: usize, result: Result<MeshMeasurements>) -> RunRecord {
    match result {
        Ok(m) => RunRecord { run, seed, orientation, measurements: Some(m), error: None },
        Err(e) => {
            log::warn!("run {run} (seed {seed}) failed: {e}");
            RunRecord { run, seed, orientation, measurements: None, error: Some(e.to_string()) }
        }
    }
}

/// `n_runs` seeds at each orientation of a box or cylinder, compared with
/// the closed-form reference. Runs execute in parallel.
pub fn run_known_object_experiment(
    object: &SceneSpec,
    n_runs: usize,
    orientations: &[RigidTransform],
    cfg: &RunConfig,
) -> Result<ExperimentReport> {
    if n_runs == 0 || orientations.is_empty() {
        return Err(Error::Config("need at least one run and one orientation".into()));
    }
    let reference = object
        .analytic_reference()
        .ok_or_else(|| Error::Config(format!("{} has no closed-form reference", object.object_id())))?;
    let jobs: Vec<(usize, usize, u64)> = (0..orientations.len())
        .flat_map(|o| (0..n_runs).map(move |k| (o, k)))
        .enumerate()
        .map(|(run, (o, k))| (run, o, run_seed(cfg.seed, k)))
        .collect();
    let runs = jobs
        .into_par_iter()
        .map(|(run, o, seed)| {
            let run_cfg = RunConfig {
                scene: object.clone(),
                object_pose: orientations[o],
                seed,
                session_dir: cfg.session_dir.as_ref().map(|d| d.join(format!("run_{run:03}"))),
                ..cfg.clone()
            };
            record(run, seed, o, run_pipeline(&run_cfg).map(|out| out.measurements))
        })
        .collect();
    Ok(ExperimentReport::from_runs(&object.object_id(), runs, reference, ReferenceKind::Analytic))
}

/// Five orientations of a known object: upright, lying along two axes and
/// two oblique tilts.
pub fn default_orientations() -> Vec<RigidTransform> {
    use crate::geometry::Vec3;
    use std::f64::consts::FRAC_PI_2;
    vec![
        RigidTransform::identity(),
        RigidTransform::from_axis_angle(Vec3::x(), FRAC_PI_2, Vec3::zeros()),
        RigidTransform::from_axis_angle(Vec3::y(), FRAC_PI_2, Vec3::zeros()),
        RigidTransform::from_axis_angle(Vec3::new(1.0, 1.0, 0.0).normalize(), 0.6, Vec3::zeros()),
        RigidTransform::from_axis_angle(Vec3::new(-1.0, 2.0, 0.5).normalize(), 1.1, Vec3::zeros()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceRow {
    pub delay_us: u64,
    pub exposure_us: u64,
    pub seeds: usize,
    /// Mean over seeds of the per-seed pooled retention.
    pub mean_retention: f64,
    pub std_retention: f64,
    pub min_retention: f64,
    pub interfering_pairs: usize,
}

/// Target-point retention per delay, averaged over `n_seeds` seeds. Scenes
/// are rendered once; only noise and interference vary with the seed.
pub fn run_interference_experiment(delays_us: &[u64], n_seeds: usize, cfg: &RunConfig) -> Result<Vec<InterferenceRow>> {
    if delays_us.is_empty() || n_seeds == 0 {
        return Err(Error::Config("need at least one delay and one seed".into()));
    }
    let scene = cfg.build_scene()?;
    let rig = cfg.build_rig()?;
    let renders = render_rig(&scene, &rig);
    let ids: Vec<u32> = rig.iter().map(|s| s.id).collect();
    delays_us
        .iter()
        .map(|&delay| {
            let schedule = build_schedule(&ids, delay, cfg.exposure_us)?;
            let per_seed: Vec<(f64, usize)> = (0..n_seeds)
                .into_par_iter()
                .map(|k| {
                    let c = capture_from_renders(&scene, &rig, &renders, &schedule, &cfg.interference, run_seed(cfg.seed, k))?;
                    Ok((c.pooled_retention(), c.interfering_pairs.len()))
                })
                .collect::<Result<_>>()?;
            let values: Vec<f64> = per_seed.iter().map(|v| v.0).collect();
            let s = Summary::of(&values).expect("n_seeds > 0");
            Ok(InterferenceRow {
                delay_us: delay,
                exposure_us: cfg.exposure_us,
                seeds: n_seeds,
                mean_retention: s.mean,
                std_retention: s.std,
                min_retention: values.iter().cloned().fold(f64::INFINITY, f64::min),
                interfering_pairs: per_seed[0].1,
            })
        })
        .collect()
}

pub fn write_interference_csv(path: &Path, rows: &[InterferenceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Voxelization reference for the animal at `scale` (targets only).
pub fn animal_reference(scale: f64, spacing: f64) -> Result<MeshMeasurements> {
    let scene = crate::sim::make_animal_model(scale);
    let targets: Vec<ScenePrimitive> = scene.targets().cloned().collect();
    Ok(oracle_measurements(&targets, spacing)?.measurements)
}

/// `n_runs` scans of the synthetic animal. `reference` skips the oracle
/// computation when already known. Runs whose registration or
/// reconstruction failed are recorded and excluded.
pub fn run_animal_experiment(
    scale: f64,
    n_runs: usize,
    cfg: &RunConfig,
    reference: Option<MeshMeasurements>,
) -> Result<ExperimentReport> {
    if n_runs < 5 {
        return Err(Error::Config(format!("the animal study takes at least 5 runs, got {n_runs}")));
    }
    let reference = match reference {
        Some(r) => r,
        None => animal_reference(scale, ANIMAL_ORACLE_SPACING)?,
    };
    let scene = SceneSpec::Animal { scale };
    let runs = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let seed = run_seed(cfg.seed, run);
            let run_cfg = RunConfig {
                scene: scene.clone(),
                seed,
                session_dir: cfg.session_dir.as_ref().map(|d| d.join(format!("run_{run:03}"))),
                ..cfg.clone()
            };
            record(run, seed, 0, run_pipeline(&run_cfg).map(|out| out.measurements))
        })
        .collect();
    Ok(ExperimentReport::from_runs(&scene.object_id(), runs, reference, ReferenceKind::Oracle))
}
