use std::path::Path;

use crate::epigeo::{Intrinsics, Pose};
use crate::imageio::Image;

use super::splat::{camera_points, splat_forward};
use super::{Scene, SceneError};

/// Pixels whose total splat weight falls below this have no depth.
pub const DEPTH_VALID_WEIGHT: f64 = 1e-3;

/// Per-pixel depth with a validity mask; invalid entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "depth buffer size");
        let valid = data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let data = data.into_iter().map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 }).collect();
        Self {
            width,
            height,
            data,
            valid,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.data[i])
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.data.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(d, _)| *d).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Single-channel PFM; invalid pixels are written as 0.
    pub fn write_pfm(&self, path: &Path) -> Result<(), SceneError> {
        Image::new(self.width, self.height, 1, self.data.clone())?.write_pfm(path)?;
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<Self, SceneError> {
        let img = Image::read_pfm(path)?;
        Ok(Self::new(img.width, img.height, img.to_gray().data))
    }
}

/// Depth of the highest-weight primitive at each pixel.
pub fn render_depth(scene: &Scene, pose: &Pose, k: &Intrinsics) -> DepthMap {
    let points = camera_points(scene, pose);
    let frame = splat_forward(points.data(), scene, k);
    let data = frame
        .dominant
        .iter()
        .zip(&frame.weight_sum)
        .map(|(dom, &s)| match dom {
            Some(i) if s >= DEPTH_VALID_WEIGHT => points.data()[3 * i + 2],
            _ => 0.0,
        })
        .collect();
    DepthMap::new(k.width, k.height, data)
}

/// `p`-th percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Divides by the 20th percentile of the valid depths so that it becomes 1.
pub fn normalize_depth(depth: &DepthMap) -> Result<DepthMap, SceneError> {
    let divisor = percentile(&depth.valid_values(), 20.0).ok_or(SceneError::NoValidDepth)?;
    Ok(DepthMap {
        width: depth.width,
        height: depth.height,
        data: depth.data.iter().map(|d| d / divisor).collect(),
        valid: depth.valid.clone(),
    })
}
