//! Cameras, rigid transforms and epipolar algebra.

mod camera;
mod epipolar;
pub mod lie;

pub use camera::{rotation_about, se3_exp, CameraJson, Intrinsics, Pose, RelativePose};
pub use epipolar::{
    epipolar_distance, epipolar_line, essential_from_relative, fundamental_from_essential, line_normal, near_epipole, point_line_distance, skew,
    symmetric_epipolar_distance, DistanceMode, FundamentalMatrix, Line,
};

use thiserror::Error;

/// Matches closer than this to an epipole carry no epipolar information.
pub const EPIPOLE_EXCLUSION_PX: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("relative pose has zero translation")]
    DegeneratePose,
    #[error("point coincides with the epipole")]
    EpipoleDegenerate,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("not a rotation (orthogonality error {orthogonality:e}, determinant {determinant})")]
    InvalidRotation { orthogonality: f64, determinant: f64 },
}
