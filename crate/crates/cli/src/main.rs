use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tofscan::experiment::{
    animal_reference, default_orientations, run_animal_experiment, run_interference_experiment,
    run_known_object_experiment, write_interference_csv, write_report_csv, write_summary_csv, ANIMAL_ORACLE_SPACING,
};
use tofscan::io;
use tofscan::measure::measure;
use tofscan::pipeline::{run_pipeline, CalibrationRecord, RunConfig};
use tofscan::proto::{serve, spawn_server, Client, DeviceServer, ScanOptions};
use tofscan::recon::{poisson_reconstruct, OrientedPointCloud, PoissonParams};
use tofscan::registration::{merge_clouds, register_rig};
use tofscan::segmentation::{fuse, gt_mask_path, load_masks, metrics, ArbitrationMode};
use tofscan::{Frame, PointCloud};

#[derive(Parser)]
#[command(name = "tofscan", version, about = "Multi-sensor ToF scanning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve simulated devices for the scene and rig of a run config.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Serve one device; without it every rig device gets its own port.
        #[arg(long)]
        device: Option<u32>,
        /// Address of the first device.
        #[arg(long, default_value = "127.0.0.1:7100")]
        listen: String,
    },
    /// Trigger a synchronized scan and download the frames.
    Scan {
        #[arg(long = "endpoint", required = true, value_delimiter = ',')]
        endpoints: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cattle_id: Option<String>,
        #[arg(long, default_value_t = tofscan::sync::DEFAULT_DELAY_US)]
        delay_us: u64,
        #[arg(long, default_value_t = tofscan::sync::DEFAULT_EXPOSURE_US)]
        exposure_us: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Fuse RGB and depth masks; prints metrics where ground truth exists.
    Segment {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, required = true, value_delimiter = ',')]
        devices: Vec<u32>,
        #[arg(long, default_value = "or")]
        mode: ArbitrationMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register per-device clouds (`<id>.ply`) with the calibration shot.
    Register {
        #[arg(long)]
        clouds: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long, value_delimiter = ',')]
        chain: Option<Vec<u32>>,
        /// Supplies the registration parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Poisson reconstruction of an oriented cloud.
    Reconstruct {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline for one config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        session: Option<PathBuf>,
    },
    Experiment {
        kind: ExperimentKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per orientation (known-object), per delay (interference) or scans (animal).
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,40,80,120,160")]
        delays: Vec<u64>,
        /// Table-style summary CSV next to the per-run report.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Surface area and volume of a mesh.
    Measure {
        #[arg(long)]
        mesh: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    KnownObject,
    Interference,
    Animal,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Serve { config, device, listen } => cmd_serve(&config, device, &listen),
        Command::Scan { endpoints, out, cattle_id, delay_us, exposure_us, seed, timeout_ms } => {
            let mut client = Client::new(Duration::from_millis(timeout_ms));
            let opts = ScanOptions { delay_us, exposure_us, seed, ..ScanOptions::default() };
            let session = client.trigger_scan(&endpoints, cattle_id.as_deref(), &opts);
            for f in &session.failed {
                eprintln!("{}: {}", f.endpoint, f.reason);
            }
            if !session.complete {
                bail!("scan {} incomplete", session.session_id);
            }
            let files = client.fetch_frames(&session, &out)?;
            println!("{}: {} files in {}", session.session_id, files.len(), out.join(&session.session_id).display());
            Ok(())
        }
        Command::Segment { masks, devices, mode, out } => {
            std::fs::create_dir_all(&out)?;
            for (id, pair) in load_masks(&masks, &devices)? {
                let fused = fuse(&pair, mode)?;
                io::write_bytes(&out.join(format!("{id}_fused.pgm")), &io::encode_mask_pgm(&fused))?;
                let gt = gt_mask_path(&masks, id);
                if gt.exists() {
                    let m = metrics(&fused, &io::read_mask(&gt)?)?;
                    println!("{id}: iou {:.4} fp {:.2}% fn {:.2}%", m.iou, m.fp_rate, m.fn_rate);
                }
            }
            Ok(())
        }
        Command::Register { clouds, calibration, chain, config, out } => {
            let calib: CalibrationRecord = io::read_json(&calibration)?;
            let params = match config {
                Some(p) => RunConfig::load(&p)?.registration,
                None => Default::default(),
            };
            let mut by_id = BTreeMap::new();
            for &id in calib.observations.keys() {
                let path = clouds.join(format!("{id}.ply"));
                if path.exists() {
                    by_id.insert(id, io::read_cloud(&path)?);
                }
            }
            let chain = chain.unwrap_or_else(|| by_id.keys().copied().collect());
            let graph = register_rig(&by_id, &calib.observations, &calib.model, &chain, &params)?;
            std::fs::create_dir_all(&out)?;
            io::write_json(&out.join("poses.json"), &graph)?;
            if !graph.is_complete() {
                bail!("registration chain broken: {:?}", graph.failed);
            }
            io::write_cloud(&out.join("merged.ply"), &merge_clouds(&by_id, &graph, None)?)?;
            Ok(())
        }
        Command::Reconstruct { cloud, resolution, out } => {
            let cloud: PointCloud = io::read_cloud(&cloud)?;
            let sources = vec![0; cloud.len()];
            let oriented = OrientedPointCloud::new(cloud.with_frame(Frame::World), sources)?;
            let recon = poisson_reconstruct(&oriented, &PoissonParams::with_resolution(resolution))?;
            io::write_mesh(&out, &recon.mesh)?;
            print_measurements(&recon.mesh)
        }
        Command::Run { config, session } => {
            let mut cfg = RunConfig::load(&config)?;
            if session.is_some() {
                cfg.session_dir = session;
            }
            let out = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.measurements)?);
            Ok(())
        }
        Command::Experiment { kind, config, out, runs, delays, summary } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            match kind {
                ExperimentKind::KnownObject => {
                    let report = run_known_object_experiment(&cfg.scene, runs.unwrap_or(3), &default_orientations(), &cfg)?;
                    finish_report(&out, summary.as_deref(), report)
                }
                ExperimentKind::Animal => {
                    let tofscan::pipeline::SceneSpec::Animal { scale } = cfg.scene else {
                        bail!("animal experiment needs an animal scene");
                    };
                    let reference = cfg.reference.map_or_else(|| animal_reference(scale, ANIMAL_ORACLE_SPACING), Ok)?;
                    let report = run_animal_experiment(scale, runs.unwrap_or(5), &cfg, Some(reference))?;
                    finish_report(&out, summary.as_deref(), report)
                }
                ExperimentKind::Interference => {
                    let rows = run_interference_experiment(&delays, runs.unwrap_or(20), &cfg)?;
                    for r in &rows {
                        println!("delay {:>4} us: retention {:.4} ± {:.4}", r.delay_us, r.mean_retention, r.std_retention);
                    }
                    write_interference_csv(&out, &rows)?;
                    Ok(())
                }
            }
        }
        Command::Measure { mesh } => print_measurements(&io::read_mesh(&mesh)?),
    }
}

fn cmd_serve(config: &Path, device: Option<u32>, listen: &str) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let scene = cfg.build_scene()?;
    let rig = cfg.build_rig()?;
    match device {
        Some(id) => {
            let server = DeviceServer::new(id, rig, scene)?;
            let listener = std::net::TcpListener::bind(listen)?;
            println!("device {id} on {}", listener.local_addr()?);
            serve(server, listener, Arc::new(AtomicBool::new(false)))?;
        }
        None => {
            let first: std::net::SocketAddr = listen.parse().context("--listen must be ip:port when serving all devices")?;
            let mut handles = Vec::new();
            for (k, s) in rig.iter().enumerate() {
                let mut addr = first;
                addr.set_port(first.port() + k as u16);
                let handle = spawn_server(DeviceServer::new(s.id, rig.clone(), scene.clone())?, addr)?;
                println!("device {} on {}", s.id, handle.addr);
                handles.push(handle);
            }
            loop {
                std::thread::park();
            }
        }
    }
    Ok(())
}

fn finish_report(out: &Path, summary: Option<&Path>, report: tofscan::experiment::ExperimentReport) -> Result<()> {
    write_report_csv(out, &report.rows())?;
    if let Some(path) = summary {
        write_summary_csv(path, std::slice::from_ref(&report))?;
    }
    if let (Some(a), Some(v)) = (report.area, report.volume) {
        println!(
            "{}: area {:.4} ± {:.4} m² (ref {:.4}, {:.2}%), volume {:.5} ± {:.5} m³ (ref {:.5}, {:.2}%), {} failed",
            report.object_id,
            a.mean,
            a.std,
            report.reference.surface_area,
            report.pct_err_area.unwrap_or(f64::NAN),
            v.mean,
            v.std,
            report.reference.volume,
            report.pct_err_volume.unwrap_or(f64::NAN),
            report.failed_runs()
        );
    }
    Ok(())
}

fn print_measurements(mesh: &tofscan::recon::TriangleMesh) -> Result<()> {
    let m = measure(mesh)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}
