//! Evaluation that does not depend on the optimization path: relative pose
//! recovery, angular errors, epipolar histograms and masked image metrics.

mod histogram;
mod metrics;
mod pose;

pub use histogram::{epipolar_histogram, EpipolarHistogram};
pub use metrics::{masked_psnr, masked_ssim, PSNR_CAP_DB};
pub use pose::{decompose_essential, eight_point, estimate_relative_pose, sampson_distance, PoseEstimate, RansacConfig, MIN_CORRESPONDENCES};

use std::path::Path;

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epigeo::{DistanceMode, FundamentalMatrix, Intrinsics, RelativePose};
use crate::imageio::Image;
use crate::matcher::{match_images, MatchError, MatchSet, MatcherConfig};
use crate::scene::WarpResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 8 correspondences, got {0}")]
    TooFewMatches(usize),
    #[error("no non-degenerate model found")]
    Degenerate,
    #[error("mask selects no usable pixels")]
    EmptyMask,
    #[error("direction of a near-zero vector is undefined")]
    ZeroVector,
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn clamped_acos_deg(c: f64) -> f64 {
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error(r_gen: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    clamped_acos_deg(((r_gen * r_gt.transpose()).trace() - 1.0) / 2.0)
}

/// Angle between two translation directions, in degrees.
pub fn translation_error(t_gen: &Vector3<f64>, t_gt: &Vector3<f64>) -> Result<f64, EvalError> {
    let (a, b) = (t_gen.norm(), t_gt.norm());
    if a <= 1e-12 || b <= 1e-12 {
        return Err(EvalError::ZeroVector);
    }
    Ok(clamped_acos_deg(t_gen.dot(t_gt) / (a * b)))
}

/// Matcher used for evaluation; deliberately different from the one in the loss.
pub fn evaluation_matcher() -> MatcherConfig {
    MatcherConfig {
        patch: 9,
        stride: 3,
        temperature: 0.05,
    }
}

/// Minimum confidence for a match to enter pose estimation and the histogram.
pub const EVAL_CONFIDENCE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub matcher: MatcherConfig,
    pub min_confidence: f64,
    pub ransac: RansacConfig,
    pub histogram_bin_px: f64,
    pub histogram_max_px: f64,
    /// Histogram `d(y, Fx)` only instead of the symmetric sum.
    pub one_sided: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            matcher: evaluation_matcher(),
            min_confidence: EVAL_CONFIDENCE,
            ransac: RansacConfig::default(),
            histogram_bin_px: 0.5,
            histogram_max_px: 20.0,
            one_sided: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "R_dist_deg")]
    pub r_dist_deg: Option<f64>,
    #[serde(rename = "T_dist_deg")]
    pub t_dist_deg: Option<f64>,
    pub epi_mean_px: Option<f64>,
    pub epi_median_px: Option<f64>,
    pub masked_psnr_db: Option<f64>,
    pub masked_ssim: Option<f64>,
    pub inliers: usize,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Everything computed for one generated view.
pub struct ViewEvaluation {
    pub report: EvalReport,
    pub matches: MatchSet,
    pub histogram: Option<EpipolarHistogram>,
    pub pose: Option<PoseEstimate>,
}

/// Matches `generated` against `reference` with the evaluation matcher and
/// scores the recovered relative pose against `gt`, the epipolar residuals
/// under the ground-truth `F`, and (given a warp) the masked image metrics.
pub fn evaluate_view(
    reference: &Image,
    generated: &Image,
    k_ref: &Intrinsics,
    k_gen: &Intrinsics,
    gt: &RelativePose,
    warp: Option<&WarpResult>,
    config: &EvalConfig,
) -> Result<ViewEvaluation, EvalError> {
    let mut flags = Vec::new();
    let all = match_images(reference, generated, &config.matcher)?;
    let matches = MatchSet::unfiltered(all.matches.into_iter().filter(|m| m.confidence >= config.min_confidence).collect());
    let x: Vec<Point2<f64>> = matches.matches.iter().map(|m| m.x.into()).collect();
    let y: Vec<Point2<f64>> = matches.matches.iter().map(|m| m.y.into()).collect();

    let histogram = match FundamentalMatrix::from_relative(gt, k_ref, k_gen) {
        Ok(f) if !x.is_empty() => {
            let pairs: Vec<_> = x.iter().copied().zip(y.iter().copied()).collect();
            let mode = if config.one_sided { DistanceMode::OneSided } else { DistanceMode::Symmetric };
            Some(epipolar_histogram(&pairs, &f, mode, config.histogram_bin_px, config.histogram_max_px)?)
        }
        Ok(_) => {
            flags.push("no_confident_matches".to_string());
            None
        }
        Err(_) => {
            flags.push("zero_baseline_ground_truth".to_string());
            None
        }
    };

    let pose = match estimate_relative_pose(&x, &y, k_ref, k_gen, &config.ransac) {
        Ok(p) => {
            if p.degenerate {
                flags.push("degenerate".to_string());
            }
            Some(p)
        }
        Err(e) => {
            flags.push(format!("pose_failed: {e}"));
            None
        }
    };
    let r_dist_deg = pose.as_ref().map(|p| rotation_error(&p.rotation, gt.rotation()));
    let t_dist_deg = pose.as_ref().and_then(|p| translation_error(&p.translation, gt.translation()).ok());

    let (mut psnr, mut ssim) = (None, None);
    if let Some(w) = warp {
        match masked_psnr(generated, &w.image, &w.mask) {
            Ok(v) => psnr = Some(v),
            Err(e) => flags.push(format!("psnr: {e}")),
        }
        match masked_ssim(generated, &w.image, &w.mask) {
            Ok(v) => ssim = Some(v),
            Err(e) => flags.push(format!("ssim: {e}")),
        }
    }

    Ok(ViewEvaluation {
        report: EvalReport {
            r_dist_deg,
            t_dist_deg,
            epi_mean_px: histogram.as_ref().map(|h| h.mean).filter(|v| v.is_finite()),
            epi_median_px: histogram.as_ref().map(|h| h.median).filter(|v| v.is_finite()),
            masked_psnr_db: psnr,
            masked_ssim: ssim,
            inliers: pose.as_ref().map_or(0, |p| p.inliers),
            flags,
        },
        matches,
        histogram,
        pose,
    })
}
