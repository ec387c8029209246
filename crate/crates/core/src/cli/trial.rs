//! One refinement trial: a scene seen from a reference camera, a target
//! pose on the orbit grid, a generator and a seed.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::epigeo::{FundamentalMatrix, GeoError, Intrinsics, Pose, RelativePose};
use crate::evalkit::{evaluate_view, EpipolarHistogram, EvalConfig, EvalError, EvalReport};
use crate::imageio::Image;
use crate::refine::{passthrough, refine, refine_from_seed, RefineError, RefinementConfig, RefinementOutcome};
use crate::sampler::{sample_initial_latent, Generator, LinearDdimGenerator, NoiseSchedule, PoseLatentGenerator, ScheduleError, ScheduleJson};
use crate::scene::{make_scene, orbit_pose, render, warp_reference, Scene, SceneError, WarpResult};

/// Primitive count and depth range of the standard experiment scenes.
pub const STANDARD_PRIMITIVES: usize = 800;
pub const STANDARD_DEPTH_RANGE: (f64, f64) = (2.0, 4.0);
pub const STANDARD_RESOLUTION: usize = 128;

/// Trace and report flag for pairs whose relative translation vanishes.
pub const ZERO_BASELINE: &str = "zero_baseline";

#[derive(Debug, Error)]
pub enum TrialError {
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid generator: {0}")]
    Generator(String),
}

/// Which generator produces the image being refined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Re-renders the scene from a perturbed target camera; the seed draws
    /// the perturbation.
    PoseLatent {
        /// Range of both the rotation error and the translation-direction
        /// error of the initial perturbation, in degrees.
        #[serde(default = "default_perturbation")]
        perturbation_deg: [f64; 2],
    },
    /// Linear-denoiser DDIM chain; the seed draws the starting latent.
    LinearDdim {
        a: f64,
        #[serde(default)]
        schedule: Option<ScheduleJson>,
    },
}

fn default_perturbation() -> [f64; 2] {
    [2.0, 8.0]
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::PoseLatent {
            perturbation_deg: default_perturbation(),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), TrialError> {
        match self {
            GeneratorSpec::PoseLatent { perturbation_deg: [lo, hi] } => {
                if !(0.0 <= *lo && lo <= hi && *hi < 90.0) {
                    return Err(TrialError::Generator(format!("perturbation range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 90")));
                }
            }
            GeneratorSpec::LinearDdim { a, schedule } => {
                if !a.is_finite() {
                    return Err(TrialError::Generator("slope must be finite".into()));
                }
                if let Some(s) = schedule {
                    NoiseSchedule::from_json(s)?;
                }
            }
        }
        Ok(())
    }
}

/// Standard experiment scene for `seed`.
pub fn standard_scene(seed: u64) -> Scene {
    make_scene(seed, STANDARD_PRIMITIVES, STANDARD_DEPTH_RANGE).expect("standard scene parameters are valid")
}

/// Everything about a trial that does not depend on the generator.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub scene: Scene,
    pub reference_pose: Pose,
    pub target_pose: Pose,
    pub k: Intrinsics,
    pub reference: Image,
    pub relative: RelativePose,
    pub warp: WarpResult,
}

impl TrialSetup {
    /// Target camera orbits the scene pivot by the given angles.
    pub fn new(scene: Scene, reference_pose: Pose, k: Intrinsics, azimuth_deg: f64, elevation_deg: f64) -> Self {
        let target_pose = orbit_pose(&reference_pose, &scene.pivot(), azimuth_deg, elevation_deg);
        Self::with_target(scene, reference_pose, target_pose, k)
    }

    pub fn with_target(scene: Scene, reference_pose: Pose, target_pose: Pose, k: Intrinsics) -> Self {
        let reference = render(&scene, &reference_pose, &k);
        let warp = warp_reference(&scene, &reference_pose, &reference, &target_pose, &k);
        Self {
            relative: RelativePose::between(&reference_pose, &target_pose),
            scene,
            reference_pose,
            target_pose,
            k,
            reference,
            warp,
        }
    }

    pub fn fundamental(&self) -> Result<FundamentalMatrix, GeoError> {
        FundamentalMatrix::from_relative(&self.relative, &self.k, &self.k)
    }
}

/// Pose latent whose relative pose to `reference_pose` is off by a rotation
/// about a random axis and has its translation direction turned by an exact
/// angle, both angles drawn uniformly from `range_deg`.
pub fn perturbation_latent(seed: u64, range_deg: [f64; 2], generator: &PoseLatentGenerator, reference_pose: &Pose) -> [f64; 6] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        if v.norm() > 1e-6 {
            break v.normalize();
        }
    };
    let draw = |rng: &mut ChaCha8Rng| if range_deg[1] > range_deg[0] { rng.random_range(range_deg[0]..=range_deg[1]) } else { range_deg[0] };
    let axis = unit(&mut rng);
    let rot = draw(&mut rng).to_radians();
    let trans = draw(&mut rng).to_radians();
    let omega = axis * rot;

    let relative_translation = |rho: [f64; 3]| {
        let z = [rho[0], rho[1], rho[2], omega.x, omega.y, omega.z];
        *RelativePose::between(reference_pose, &generator.pose_for(&z)).translation()
    };
    let t = *RelativePose::between(reference_pose, &generator.target_pose).translation();
    let len = t.norm();
    if len < 1e-12 {
        return [0.0, 0.0, 0.0, omega.x, omega.y, omega.z];
    }
    let dir = t / len;
    let side = {
        let u = unit(&mut rng);
        let p = u - dir * dir.dot(&u);
        if p.norm() > 1e-6 { p.normalize() } else { dir.cross(&Vector3::x()).normalize() }
    };
    let wanted = (dir * trans.cos() + side * trans.sin()) * len;
    // The relative translation is affine in ρ for fixed ω.
    let base = relative_translation([0.0; 3]);
    let v = Matrix3::from_columns(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].map(|e| relative_translation(e) - base));
    let rho = v.lu().solve(&(wanted - base)).unwrap_or_else(Vector3::zeros);
    [rho.x, rho.y, rho.z, omega.x, omega.y, omega.z]
}

/// Pre/post evaluation around one refinement run.
pub struct TrialOutcome {
    pub pre: EvalReport,
    pub post: EvalReport,
    pub pre_histogram: Option<EpipolarHistogram>,
    pub post_histogram: Option<EpipolarHistogram>,
    pub refinement: RefinementOutcome,
    pub initial_latent: Vec<f64>,
    /// Reference warped into the target view (evaluation mask).
    pub warp: WarpResult,
}

/// Runs refinement for `setup` and evaluates the initial and refined images
/// with the independent evaluation matcher.
pub fn run_trial(setup: &TrialSetup, generator: &GeneratorSpec, config: &RefinementConfig, eval: &EvalConfig, seed: u64) -> Result<TrialOutcome, TrialError> {
    generator.validate()?;
    // Without a baseline there is no epipolar geometry to refine against.
    let f = setup.fundamental().ok();
    let (refinement, initial_latent) = match generator {
        GeneratorSpec::PoseLatent { perturbation_deg } => {
            let g = PoseLatentGenerator::new(setup.scene.clone(), setup.target_pose, setup.k);
            let z0 = Tensor::vector(&perturbation_latent(seed, *perturbation_deg, &g, &setup.reference_pose));
            let out = match &f {
                Some(f) => refine(&g, &setup.reference, f, config, z0.clone())?,
                None => passthrough(&g, z0.clone(), ZERO_BASELINE)?,
            };
            (out, z0.into_data())
        }
        GeneratorSpec::LinearDdim { a, schedule } => {
            let schedule = match schedule {
                Some(s) => NoiseSchedule::from_json(s)?,
                None => NoiseSchedule::default(),
            };
            let g = LinearDdimGenerator {
                schedule,
                a: *a,
                height: setup.k.height,
                width: setup.k.width,
            };
            let out = match &f {
                Some(f) => refine_from_seed(&g, &setup.reference, f, config, seed)?,
                None => passthrough(&g, sample_initial_latent(seed, &g.latent_shape()), ZERO_BASELINE)?,
            };
            let init = sample_initial_latent(seed.wrapping_add(out.trace.seed_attempts as u64 - 1), &out.trace.latent_shape).into_data();
            (out, init)
        }
    };
    let pre = evaluate_view(&setup.reference, &refinement.initial_image, &setup.k, &setup.k, &setup.relative, Some(&setup.warp), eval)?;
    let post = evaluate_view(&setup.reference, &refinement.image, &setup.k, &setup.k, &setup.relative, Some(&setup.warp), eval)?;
    Ok(TrialOutcome {
        pre: pre.report,
        post: post.report,
        pre_histogram: pre.histogram,
        post_histogram: post.histogram,
        refinement,
        initial_latent,
        warp: setup.warp.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{rotation_error, translation_error};

    #[test]
    fn perturbation_hits_requested_errors() {
        let scene = make_scene(0, 200, STANDARD_DEPTH_RANGE).unwrap();
        let target = orbit_pose(&Pose::identity(), &scene.pivot(), 10.0, 5.0);
        let rel = RelativePose::between(&Pose::identity(), &target);
        let g = PoseLatentGenerator::new(scene, target, Intrinsics::standard(32, 32));
        for seed in 0..10 {
            let z = perturbation_latent(seed, [4.0, 4.0], &g, &Pose::identity());
            let perturbed = RelativePose::between(&Pose::identity(), &g.pose_for(&z));
            assert!((rotation_error(perturbed.rotation(), rel.rotation()) - 4.0).abs() < 1e-9);
            assert!((translation_error(perturbed.translation(), rel.translation()).unwrap() - 4.0).abs() < 1e-9);
        }
        let draw = |seed| perturbation_latent(seed, [2.0, 8.0], &g, &Pose::identity());
        assert_ne!(draw(1), draw(2));
        assert_eq!(draw(1), draw(1));
    }

    #[test]
    fn generator_spec_json() {
        let spec: GeneratorSpec = serde_json::from_str(r#"{"kind":"pose_latent"}"#).unwrap();
        assert_eq!(spec, GeneratorSpec::default());
        let spec: GeneratorSpec = serde_json::from_str(r#"{"kind":"linear_ddim","a":0.1}"#).unwrap();
        assert!(spec.validate().is_ok());
        let bad = GeneratorSpec::PoseLatent { perturbation_deg: [5.0, 2.0] };
        assert!(bad.validate().is_err());
    }
}
