//! Synthetic scenes, a differentiable splat renderer, ground-truth depth and
//! the depth-mesh warp from the reference view to a target view.

mod depth;
mod mesh;
mod splat;

pub use depth::{normalize_depth, percentile, render_depth, DepthMap, DEPTH_VALID_WEIGHT};
pub use mesh::{cull_faces, depth_to_mesh, render_warp, warp_reference, Mesh, WarpResult, MAX_FACE_ANGLE_DEG};
pub use splat::{camera_points, render, render_var, SplatOp, SPLAT_EPS};

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epigeo::{rotation_about, Pose};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("a scene needs at least {min} primitives, got {got}")]
    TooFewPrimitives { min: usize, got: usize },
    #[error("invalid depth range [{0}, {1}]")]
    DepthRange(f64, f64),
    #[error("depth map has no valid pixels")]
    NoValidDepth,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] crate::imageio::ImageError),
}

pub const MIN_PRIMITIVES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(rename = "p")]
    pub position: [f64; 3],
    #[serde(rename = "c")]
    pub color: [f64; 3],
    #[serde(rename = "r")]
    pub radius: f64,
}

/// Immutable set of coloured Gaussian blobs, seen by the reference camera
/// (identity pose) from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    /// 20th percentile of primitive depths in the reference camera.
    #[serde(default)]
    pub scale: f64,
}

/// Half-width of the sampled region in normalized image coordinates. The
/// reference view spans ±0.5, so about 83% of the primitives land inside it.
const SPREAD: f64 = 0.55;
/// Blob size relative to the mean spacing between neighbouring primitives.
const RADIUS_TO_SPACING: (f64, f64) = (0.175, 0.375);

/// Random scene whose primitives lie on a smooth surface in front of the
/// reference camera, so that every view sees a coherent textured layer.
pub fn make_scene(seed: u64, n_primitives: usize, depth_range: (f64, f64)) -> Result<Scene, SceneError> {
    if n_primitives < MIN_PRIMITIVES {
        return Err(SceneError::TooFewPrimitives {
            min: MIN_PRIMITIVES,
            got: n_primitives,
        });
    }
    let (near, far) = depth_range;
    if !(near > 0.0 && far >= near && far.is_finite()) {
        return Err(SceneError::DepthRange(near, far));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface = Surface::random(&mut rng);
    let spacing = 2.0 * SPREAD / (n_primitives as f64).sqrt();
    let primitives: Vec<Primitive> = (0..n_primitives)
        .map(|_| {
            let u = rng.random_range(-SPREAD..=SPREAD);
            let v = rng.random_range(-SPREAD..=SPREAD);
            let z = near + (far - near) * surface.height(u, v);
            let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let angular = spacing * rng.random_range(RADIUS_TO_SPACING.0..=RADIUS_TO_SPACING.1);
            Primitive {
                position: [u * z, v * z, z],
                color,
                radius: angular * z,
            }
        })
        .collect();
    let depths: Vec<f64> = primitives.iter().map(|p| p.position[2]).collect();
    let scale = percentile(&depths, 20.0).expect("non-empty");
    Ok(Scene {
        seed,
        primitives,
        scale,
    })
}

/// Height field in [0, 1] over the sampled region: a tilt plus two waves,
/// rescaled by its extremes on a grid.
struct Surface {
    tilt: (f64, f64),
    waves: [(f64, f64, f64, f64); 2],
    lo: f64,
    hi: f64,
}

impl Surface {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let tilt = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let mut waves = [(0.0, 0.0, 0.0, 0.0); 2];
        for (i, w) in waves.iter_mut().enumerate() {
            let freq = rng.random_range(2.0..=5.0);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = 0.3 / (i + 1) as f64;
            *w = (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU), amp);
        }
        let mut s = Self {
            tilt,
            waves,
            lo: 0.0,
            hi: 1.0,
        };
        let steps = 32;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=steps {
            for j in 0..=steps {
                let u = -SPREAD + 2.0 * SPREAD * i as f64 / steps as f64;
                let v = -SPREAD + 2.0 * SPREAD * j as f64 / steps as f64;
                let h = s.raw(u, v);
                lo = lo.min(h);
                hi = hi.max(h);
            }
        }
        s.lo = lo;
        s.hi = hi.max(lo + 1e-12);
        s
    }

    fn raw(&self, u: f64, v: f64) -> f64 {
        let waves: f64 = self.waves.iter().map(|(a, b, phase, amp)| amp * (a * u + b * v + phase).sin()).sum();
        self.tilt.0 * u + self.tilt.1 * v + waves
    }

    fn height(&self, u: f64, v: f64) -> f64 {
        ((self.raw(u, v) - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

impl Scene {
    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Orbit centre on the reference optical axis, at the median primitive depth.
    pub fn pivot(&self) -> Vector3<f64> {
        let depths: Vec<f64> = self.primitives.iter().map(|p| p.position[2]).collect();
        Vector3::new(0.0, 0.0, percentile(&depths, 50.0).unwrap_or(1.0))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SceneError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(&fs::read_to_string(path)?)?;
        if scene.primitives.len() < MIN_PRIMITIVES {
            return Err(SceneError::TooFewPrimitives {
                min: MIN_PRIMITIVES,
                got: scene.primitives.len(),
            });
        }
        Ok(scene)
    }
}

/// Camera obtained by orbiting `reference` about `pivot` by `azimuth_deg`
/// (about the camera's vertical axis) and then `elevation_deg` (about its
/// horizontal axis), still looking at the pivot.
pub fn orbit_pose(reference: &Pose, pivot: &Vector3<f64>, azimuth_deg: f64, elevation_deg: f64) -> Pose {
    let r_az = rotation_about(&Vector3::y(), azimuth_deg.to_radians());
    let r_el = rotation_about(&Vector3::x(), elevation_deg.to_radians());
    // Rotating the world by R about c moves the camera by Rᵀ about c.
    let r = r_el * r_az;
    let c = reference.transform(pivot);
    let moved = Pose {
        rotation: r,
        translation: c - r * c,
    };
    moved.compose(reference)
}
