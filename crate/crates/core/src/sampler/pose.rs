use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};

use crate::diffcore::{CustomOp, DiffError, Tape, Tensor, Var};
use crate::epigeo::lie::se3_exp_jacobian;
use crate::epigeo::{se3_exp, Intrinsics, Pose};
use crate::scene::{camera_points, render_var, Scene};

use super::Generator;

/// Renders a scene from `se3_exp(z) ∘ target_pose`, with `z` a 6-vector
/// `(ρ, ω)`. `z = 0` reproduces the target view exactly.
#[derive(Debug, Clone)]
pub struct PoseLatentGenerator {
    pub scene: Scene,
    pub target_pose: Pose,
    pub k: Intrinsics,
    target_points: Tensor,
}

impl PoseLatentGenerator {
    pub fn new(scene: Scene, target_pose: Pose, k: Intrinsics) -> Self {
        let target_points = camera_points(&scene, &target_pose);
        Self {
            scene,
            target_pose,
            k,
            target_points,
        }
    }

    /// Camera pose the generator renders from for latent `z`.
    pub fn pose_for(&self, z: &[f64; 6]) -> Pose {
        se3_exp(z).compose(&self.target_pose)
    }

    /// Latent that rotates the target camera by `angle_deg` about `axis`.
    pub fn rotation_latent(axis: [f64; 3], angle_deg: f64) -> [f64; 6] {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let a = angle_deg.to_radians() / n;
        [0.0, 0.0, 0.0, axis[0] * a, axis[1] * a, axis[2] * a]
    }
}

impl Generator for PoseLatentGenerator {
    fn latent_shape(&self) -> Vec<usize> {
        vec![6]
    }

    fn generate<'t>(&self, tape: &'t Tape, latent: Var<'t>) -> Result<Var<'t>, DiffError> {
        let points = transform_points(tape, latent, &self.target_points)?;
        render_var(tape, &self.scene, points, &self.k)
    }

    /// Rotation angle (degrees) and camera-centre displacement of the
    /// perturbation, both zero exactly at the target pose.
    fn diagnostics(&self, latent: &Tensor) -> Vec<(&'static str, f64)> {
        let Ok(z) = <[f64; 6]>::try_from(latent.data()) else {
            return Vec::new();
        };
        let p = self.pose_for(&z);
        let cos = ((p.rotation * self.target_pose.rotation.transpose()).trace() - 1.0) / 2.0;
        vec![
            ("latent_rotation_deg", cos.clamp(-1.0, 1.0).acos().to_degrees()),
            ("latent_center_shift", (p.center() - self.target_pose.center()).norm()),
        ]
    }
}

/// `R(z)·p + t(z)` for every row `p` of `points`, differentiable in `z`.
///
/// Evaluated as `p + ((R(z) − I)·p + t(z))` so that `z = 0` returns `points`
/// bit for bit.
pub fn transform_points<'t>(tape: &'t Tape, z: Var<'t>, points: &Tensor) -> Result<Var<'t>, DiffError> {
    let zv = z.value();
    let xi: [f64; 6] = zv.data().try_into().map_err(|_| DiffError::ShapeMismatch {
        op: "se3_transform",
        lhs: zv.shape().to_vec(),
        rhs: vec![6],
    })?;
    let m = se3_exp(&xi);
    let r_minus_i = m.rotation - Matrix3::identity();
    let out = points
        .data()
        .chunks(3)
        .flat_map(|p| {
            let p = Vector3::new(p[0], p[1], p[2]);
            let q = p + (r_minus_i * p + m.translation);
            [q.x, q.y, q.z]
        })
        .collect();
    let op = PoseTransformOp { points: points.clone() };
    tape.custom(Rc::new(op), &[z], Tensor::new(points.shape(), out)?)
}

/// Backward pass of [`transform_points`] via the forward-mode se3 Jacobian.
pub struct PoseTransformOp {
    points: Tensor,
}

impl CustomOp for PoseTransformOp {
    fn name(&self) -> &'static str {
        "se3_transform"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let xi: [f64; 6] = inputs[0].data().try_into().expect("6-vector latent");
        let jac = se3_exp_jacobian(xi);
        // Accumulate Σ_i g_i p_iᵀ (3×3) and Σ_i g_i (3) once, then contract with the Jacobian.
        let mut gp = [[0.0; 3]; 3];
        let mut gs = [0.0; 3];
        for (p, g) in self.points.data().chunks(3).zip(grad.chunks(3)) {
            for a in 0..3 {
                gs[a] += g[a];
                for b in 0..3 {
                    gp[a][b] += g[a] * p[b];
                }
            }
        }
        let mut out = vec![0.0; 6];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += jac[3 * a + b][j] * gp[a][b];
                }
                acc += jac[9 + a][j] * gs[a];
            }
            *o = acc;
        }
        vec![Some(out)]
    }
}
