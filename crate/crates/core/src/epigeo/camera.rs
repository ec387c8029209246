use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use super::lie::se3_exp_generic;
use super::GeoError;

/// Pinhole calibration in pixels. Pixel centres sit on integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeoError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, focal length equal to the image width, centred principal point.
    pub fn standard(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Point2<f64>> {
        (p.z > 0.0).then(|| Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// Normalized image coordinates of a pixel.
    pub fn normalize(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// Rigid world-to-camera transform: `X_cam = R·X_world + t`.
///
/// This is the only convention used in the crate. A camera centre in world
/// coordinates is `-Rᵀt`; a relative pose maps reference-camera coordinates
/// to target-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeoError> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeoError::InvalidRotation { orthogonality: orth, determinant: det });
        }
        Ok(Self { rotation, translation })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera looking from `eye` towards `target` with the given world up
    /// direction. Camera axes: x right, y down, z forward.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Pose {
            rotation,
            translation: -(rotation * eye),
        }
    }
}

/// Pose of the target camera expressed in the reference camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose(pub Pose);

impl RelativePose {
    /// Relative pose mapping `reference` camera coordinates to `target` camera coordinates.
    pub fn between(reference: &Pose, target: &Pose) -> Self {
        RelativePose(target.compose(&reference.inverse()))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.0.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.0.translation
    }
}

/// Exponential map of `xi = (ρ, ω)` (translation first, rotation second).
pub fn se3_exp(xi: &[f64; 6]) -> Pose {
    let (r, t) = se3_exp_generic(*xi);
    Pose {
        rotation: Matrix3::from_fn(|i, j| r[i][j]),
        translation: Vector3::new(t[0], t[1], t[2]),
    }
}

/// Rotation by `angle` radians about `axis` (normalized internally).
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let w = axis.normalize() * angle;
    se3_exp(&[0.0, 0.0, 0.0, w.x, w.y, w.z]).rotation
}

/// Pose and calibration as exchanged in JSON files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraJson {
    pub fn new(pose: &Pose, k: &Intrinsics) -> Self {
        let r = pose.rotation;
        Self {
            r: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            t: [pose.translation.x, pose.translation.y, pose.translation.z],
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }

    pub fn pose(&self) -> Result<Pose, GeoError> {
        Pose::new(Matrix3::from_fn(|i, j| self.r[i][j]), Vector3::from(self.t))
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, GeoError> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}
