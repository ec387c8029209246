use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::epigeo::{CameraJson, Intrinsics, Pose};
use crate::evalkit::EvalConfig;
use crate::refine::RefinementConfig;

use super::trial::GeneratorSpec;
use super::CliError;

/// Orbit angles (degrees) targets may use, besides 0.
pub const ANGLE_GRID_DEG: [f64; 7] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetAngles {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

/// One scene file or several (ablations average over scenes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneFiles {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl SceneFiles {
    pub fn paths(&self) -> &[PathBuf] {
        match self {
            SceneFiles::One(p) => std::slice::from_ref(p),
            SceneFiles::Many(v) => v,
        }
    }
}

/// A batch of refinement runs: every scene × target × seed.
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub scene: SceneFiles,
    pub reference_camera: CameraJson,
    pub targets: Vec<TargetAngles>,
    #[serde(default = "default_grid")]
    pub angle_grid_deg: Vec<f64>,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

fn default_grid() -> Vec<f64> {
    ANGLE_GRID_DEG.to_vec()
}

impl RunManifest {
    /// Reads, resolves and validates a manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        m.scene = SceneFiles::Many(m.scene.paths().iter().map(resolve).collect());
        m.output_dir = resolve(&m.output_dir);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        if self.scene.paths().is_empty() {
            return usage("manifest lists no scene files".into());
        }
        if let Some(p) = self.scene.paths().iter().find(|p| !p.is_file()) {
            return usage(format!("scene file {} does not exist", p.display()));
        }
        if self.targets.is_empty() {
            return usage("manifest lists no targets".into());
        }
        if self.seeds.is_empty() {
            return usage("manifest lists no seeds".into());
        }
        for t in &self.targets {
            for a in [t.azimuth_deg, t.elevation_deg] {
                let on_grid = a == 0.0 || self.angle_grid_deg.iter().any(|g| a.abs() == *g);
                if !on_grid {
                    return usage(format!("target angle {a} is not 0 or ± a value of the angle grid {:?}", self.angle_grid_deg));
                }
            }
        }
        self.reference_camera.pose().map_err(|e| CliError::Usage(format!("reference camera: {e}")))?;
        self.reference_camera.intrinsics().map_err(|e| CliError::Usage(format!("reference camera: {e}")))?;
        self.refinement.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.generator.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn reference_pose(&self) -> Pose {
        self.reference_camera.pose().expect("validated")
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.reference_camera.intrinsics().expect("validated")
    }

    /// The 14-pose protocol grid: every grid angle as pure azimuth and as
    /// pure elevation.
    pub fn protocol_targets() -> Vec<TargetAngles> {
        let az = ANGLE_GRID_DEG.iter().map(|&a| TargetAngles { azimuth_deg: a, elevation_deg: 0.0 });
        let el = ANGLE_GRID_DEG.iter().map(|&e| TargetAngles { azimuth_deg: 0.0, elevation_deg: e });
        az.chain(el).collect()
    }
}
