//! Multi-sensor time-of-flight scanning pipeline.
//!
//! The crate covers every stage between synchronized RGBD capture and mesh
//! metrology:
//!
//! * [`geometry`] and [`io`]: pinhole camera model, rigid transforms, rasters,
//!   point clouds and their on-disk formats.
//! * [`sim`]: analytic ray-cast rendering of desk-scale scenes with ToF noise
//!   and IR cross-interference.
//! * [`sync`]: daisy-chain capture schedules and the simulated multi-device
//!   capture.
//! * [`proto`]: the binary client/server acquisition protocol.
//! * [`segmentation`]: mask voting arbitration and segmentation metrics.
//! * [`registration`]: fiducial initialisation, multi-scale colored ICP and
//!   chaining of pairwise results.
//! * [`recon`]: oriented normals, Poisson reconstruction and mesh topology.
//! * [`measure`]: surface area, volume and reference oracles.
//! * [`pipeline`] and [`experiment`]: the end-to-end driver and the
//!   experiment runners built on top of it.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod measure;
pub mod pipeline;
pub mod proto;
pub mod recon;
pub mod registration;
pub mod segmentation;
pub mod sim;
pub mod spatial;
pub mod sync;

pub use error::{Error, Result};
pub use geometry::{
    back_project, project, transform_cloud, CameraIntrinsics, ColorImage, DepthImage, Frame,
    PointCloud, RigidTransform, Vec3,
};
pub use segmentation::BinaryMask;
