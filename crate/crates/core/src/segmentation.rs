//! Mask voting arbitration, segmentation metrics and mask application.
//!
//! Segmentation networks are not part of this crate; masks come either from
//! the simulator (oracle masks) or from PGM files produced elsewhere.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DepthImage;
use crate::io::{self, FormatError};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("{what}: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        what: &'static str,
        a_w: u32,
        a_h: u32,
        b_w: u32,
        b_h: u32,
    },
    #[error("ground truth mask has no foreground; false-negative rate is undefined")]
    EmptyGroundTruth,
    #[error("missing mask file for device {device}: {path}")]
    MissingMask { device: u32, path: String },
    #[error("mask for device {device} ({path}): {source}")]
    BadMask {
        device: u32,
        path: String,
        #[source]
        source: FormatError,
    },
    #[error("unknown arbitration mode `{0}` (expected rgb, depth, or, and)")]
    UnknownMode(String),
}

/// Row-major mask, 255 = foreground (animal / target), 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![255; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for v in 0..height {
            for u in 0..width {
                data.push(if f(u, v) { 255 } else { 0 });
            }
        }
        BinaryMask { width, height, data }
    }

    pub fn is_foreground(&self, u: u32, v: u32) -> bool {
        self.data[v as usize * self.width as usize + u as usize] != 0
    }

    pub(crate) fn is_foreground_index(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn set(&mut self, u: u32, v: u32, fg: bool) {
        self.data[v as usize * self.width as usize + u as usize] = if fg { 255 } else { 0 };
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    fn same_dims(&self, other: &BinaryMask, what: &'static str) -> Result<(), SegmentationError> {
        if self.width != other.width || self.height != other.height {
            return Err(SegmentationError::DimensionMismatch {
                what,
                a_w: self.width,
                a_h: self.height,
                b_w: other.width,
                b_h: other.height,
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| if f(a != 0, b != 0) { 255 } else { 0 })
                .collect(),
        }
    }
}

/// RGB-network and depth-network masks for one view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub rgb_mask: BinaryMask,
    pub depth_mask: BinaryMask,
}

impl MaskPair {
    pub fn new(rgb_mask: BinaryMask, depth_mask: BinaryMask) -> Result<Self, SegmentationError> {
        rgb_mask.same_dims(&depth_mask, "mask pair")?;
        Ok(MaskPair { rgb_mask, depth_mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArbitrationMode {
    RgbOnly,
    DepthOnly,
    /// Single vote: a pixel is foreground if either mask says so.
    #[default]
    OneVoteOr,
    /// Two votes: both masks must agree.
    TwoVoteAnd,
}

impl ArbitrationMode {
    pub const ALL: [ArbitrationMode; 4] = [
        ArbitrationMode::RgbOnly,
        ArbitrationMode::DepthOnly,
        ArbitrationMode::OneVoteOr,
        ArbitrationMode::TwoVoteAnd,
    ];
}

impl fmt::Display for ArbitrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArbitrationMode::RgbOnly => "rgb",
            ArbitrationMode::DepthOnly => "depth",
            ArbitrationMode::OneVoteOr => "or",
            ArbitrationMode::TwoVoteAnd => "and",
        })
    }
}

impl FromStr for ArbitrationMode {
    type Err = SegmentationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" | "rgb_only" => Ok(ArbitrationMode::RgbOnly),
            "depth" | "depth_only" => Ok(ArbitrationMode::DepthOnly),
            "or" | "one_vote_or" | "1-vote" => Ok(ArbitrationMode::OneVoteOr),
            "and" | "two_vote_and" | "2-vote" => Ok(ArbitrationMode::TwoVoteAnd),
            _ => Err(SegmentationError::UnknownMode(s.to_string())),
        }
    }
}

pub fn fuse(pair: &MaskPair, mode: ArbitrationMode) -> Result<BinaryMask, SegmentationError> {
    pair.rgb_mask.same_dims(&pair.depth_mask, "mask pair")?;
    Ok(match mode {
        ArbitrationMode::RgbOnly => pair.rgb_mask.clone(),
        ArbitrationMode::DepthOnly => pair.depth_mask.clone(),
        ArbitrationMode::OneVoteOr => pair.rgb_mask.zip_with(&pair.depth_mask, |a, b| a || b),
        ArbitrationMode::TwoVoteAnd => pair.rgb_mask.zip_with(&pair.depth_mask, |a, b| a && b),
    })
}

/// Normalisation of the false-positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FpDenominator {
    /// False positives over true-background pixels, so FP and FN are both
    /// rates in `[0, 100]`.
    #[default]
    TrueBackground,
    /// False positives over predicted-foreground pixels (false discovery rate).
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou: f64,
    /// percent
    pub fp_rate: f64,
    /// percent
    pub fn_rate: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
    total: usize,
}

fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Confusion {
    let mut c = Confusion {
        total: pred.data.len(),
        ..Default::default()
    };
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, SegmentationError> {
    pred.same_dims(gt, "prediction vs ground truth")?;
    let c = confusion(pred, gt);
    let union = c.tp + c.fp + c.fn_;
    Ok(if union == 0 { 1.0 } else { c.tp as f64 / union as f64 })
}

pub fn metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegMetrics, SegmentationError> {
    metrics_with(pred, gt, FpDenominator::TrueBackground)
}

pub fn metrics_with(pred: &BinaryMask, gt: &BinaryMask, fp_denominator: FpDenominator) -> Result<SegMetrics, SegmentationError> {
    pred.same_dims(gt, "prediction vs ground truth")?;
    let c = confusion(pred, gt);
    let gt_count = c.tp + c.fn_;
    if gt_count == 0 {
        return Err(SegmentationError::EmptyGroundTruth);
    }
    let iou = c.tp as f64 / (c.tp + c.fp + c.fn_) as f64;
    let fn_rate = 100.0 * c.fn_ as f64 / gt_count as f64;
    let denom = match fp_denominator {
        FpDenominator::TrueBackground => c.total - gt_count,
        FpDenominator::Predicted => c.tp + c.fp,
    };
    let fp_rate = if denom == 0 { 0.0 } else { 100.0 * c.fp as f64 / denom as f64 };
    Ok(SegMetrics { iou, fp_rate, fn_rate })
}

/// Zero every background pixel of `depth`.
pub fn apply_mask_to_depth(depth: &DepthImage, mask: &BinaryMask) -> Result<DepthImage, SegmentationError> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(SegmentationError::DimensionMismatch {
            what: "depth vs mask",
            a_w: depth.width,
            a_h: depth.height,
            b_w: mask.width,
            b_h: mask.height,
        });
    }
    Ok(DepthImage {
        width: depth.width,
        height: depth.height,
        data: depth
            .data
            .iter()
            .zip(&mask.data)
            .map(|(&d, &m)| if m != 0 { d } else { 0 })
            .collect(),
    })
}

pub fn rgb_mask_path(dir: &Path, device: u32) -> std::path::PathBuf {
    dir.join(format!("{device}_rgbmask.pgm"))
}

pub fn depth_mask_path(dir: &Path, device: u32) -> std::path::PathBuf {
    dir.join(format!("{device}_depthmask.pgm"))
}

/// Ground-truth mask written next to the network masks when known.
pub fn gt_mask_path(dir: &Path, device: u32) -> std::path::PathBuf {
    dir.join(format!("{device}_gtmask.pgm"))
}

/// Load `<device>_rgbmask.pgm` / `<device>_depthmask.pgm` for every device.
pub fn load_masks(dir: &Path, devices: &[u32]) -> Result<BTreeMap<u32, MaskPair>, SegmentationError> {
    let mut out = BTreeMap::new();
    for &device in devices {
        let load = |path: std::path::PathBuf| -> Result<BinaryMask, SegmentationError> {
            if !path.exists() {
                return Err(SegmentationError::MissingMask {
                    device,
                    path: path.display().to_string(),
                });
            }
            io::read_mask(&path).map_err(|source| SegmentationError::BadMask {
                device,
                path: path.display().to_string(),
                source,
            })
        };
        let rgb = load(rgb_mask_path(dir, device))?;
        let depth = load(depth_mask_path(dir, device))?;
        out.insert(device, MaskPair::new(rgb, depth)?);
    }
    Ok(out)
}

/// Write a mask pair in the layout `load_masks` expects.
pub fn save_mask_pair(dir: &Path, device: u32, pair: &MaskPair) -> std::io::Result<()> {
    io::write_bytes(&rgb_mask_path(dir, device), &io::encode_mask_pgm(&pair.rgb_mask))?;
    io::write_bytes(&depth_mask_path(dir, device), &io::encode_mask_pgm(&pair.depth_mask))
}
