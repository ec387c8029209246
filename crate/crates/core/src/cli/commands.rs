use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epigeo::{CameraJson, RelativePose};
use crate::evalkit::{evaluate_view, EvalConfig, EvalReport};
use crate::imageio::Image;
use crate::matcher::FilterPolicy;
use crate::refine::RefinementConfig;
use crate::scene::{make_scene, warp_reference, Scene, SceneError};

use super::manifest::{RunManifest, TargetAngles};
use super::trial::{run_trial, TrialOutcome, TrialSetup};
use super::CliError;

/// Writes a generated scene and returns the summary line.
pub fn cmd_scene(seed: u64, n: usize, depth_range: (f64, f64), out: &Path) -> Result<String, CliError> {
    let scene = make_scene(seed, n, depth_range).map_err(|e| CliError::Usage(e.to_string()))?;
    scene.write_json(out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    Ok(format!("wrote {} primitives (seed {seed}, depth {}..{}) to {}", scene.len(), depth_range.0, depth_range.1, out.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Contents of a per-pose `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scene: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub pre: Option<EvalReport>,
    pub post: Option<EvalReport>,
    pub initial_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_iteration: Option<usize>,
}

impl RunReport {
    fn failed(job: &Job, error: String) -> Self {
        Self {
            scene: job.scene_name.clone(),
            azimuth_deg: job.target.azimuth_deg,
            elevation_deg: job.target.elevation_deg,
            seed: job.seed,
            status: RunStatus::Failed,
            error: Some(error),
            pre: None,
            post: None,
            initial_loss: None,
            best_loss: None,
            final_loss: None,
            best_iteration: None,
        }
    }

    fn succeeded(job: &Job, outcome: &TrialOutcome) -> Self {
        let trace = &outcome.refinement.trace;
        Self {
            scene: job.scene_name.clone(),
            azimuth_deg: job.target.azimuth_deg,
            elevation_deg: job.target.elevation_deg,
            seed: job.seed,
            status: RunStatus::Ok,
            error: None,
            pre: Some(outcome.pre.clone()),
            post: Some(outcome.post.clone()),
            initial_loss: trace.initial_loss(),
            best_loss: trace.best_loss(),
            final_loss: trace.final_loss(),
            best_iteration: Some(trace.best_iteration),
        }
    }
}

/// Aggregate written to `summary.json`; means are over successful runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: Vec<RunReport>,
    pub succeeded: usize,
    pub failed: usize,
    pub mean_pre_r_dist_deg: Option<f64>,
    pub mean_post_r_dist_deg: Option<f64>,
    pub mean_pre_t_dist_deg: Option<f64>,
    pub mean_post_t_dist_deg: Option<f64>,
    pub mean_pre_epi_px: Option<f64>,
    pub mean_post_epi_px: Option<f64>,
}

impl RunSummary {
    fn new(runs: Vec<RunReport>) -> Self {
        let ok: Vec<&RunReport> = runs.iter().filter(|r| r.status == RunStatus::Ok).collect();
        let mean = |f: &dyn Fn(&RunReport) -> Option<f64>| mean_of(ok.iter().filter_map(|r| f(r)));
        Self {
            succeeded: ok.len(),
            failed: runs.len() - ok.len(),
            mean_pre_r_dist_deg: mean(&|r| r.pre.as_ref()?.r_dist_deg),
            mean_post_r_dist_deg: mean(&|r| r.post.as_ref()?.r_dist_deg),
            mean_pre_t_dist_deg: mean(&|r| r.pre.as_ref()?.t_dist_deg),
            mean_post_t_dist_deg: mean(&|r| r.post.as_ref()?.t_dist_deg),
            mean_pre_epi_px: mean(&|r| r.pre.as_ref()?.epi_mean_px),
            mean_post_epi_px: mean(&|r| r.post.as_ref()?.epi_mean_px),
            runs,
        }
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One scene × target × seed cell of a manifest.
struct Job {
    scene_index: usize,
    scene_name: String,
    target: TargetAngles,
    seed: u64,
}

impl Job {
    fn dir_name(&self) -> String {
        format!("{}_az{}_el{}_s{}", self.scene_name, self.target.azimuth_deg, self.target.elevation_deg, self.seed)
    }
}

fn load_scenes(manifest: &RunManifest) -> Result<Vec<(String, Scene)>, CliError> {
    manifest
        .scene
        .paths()
        .iter()
        .map(|p| {
            let scene = Scene::read_json(p).map_err(|e: SceneError| CliError::Usage(format!("{}: {e}", p.display())))?;
            let name = p.file_stem().map_or_else(|| "scene".to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, scene))
        })
        .collect()
}

fn jobs_of(manifest: &RunManifest, scenes: &[(String, Scene)]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (scene_index, (name, _)) in scenes.iter().enumerate() {
        for target in &manifest.targets {
            for &seed in &manifest.seeds {
                jobs.push(Job {
                    scene_index,
                    scene_name: name.clone(),
                    target: *target,
                    seed,
                });
            }
        }
    }
    jobs
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn run_job(manifest: &RunManifest, scenes: &[(String, Scene)], job: &Job, config: &RefinementConfig) -> Result<TrialOutcome, String> {
    let setup = TrialSetup::new(
        scenes[job.scene_index].1.clone(),
        manifest.reference_pose(),
        manifest.intrinsics(),
        job.target.azimuth_deg,
        job.target.elevation_deg,
    );
    run_trial(&setup, &manifest.generator, config, &manifest.evaluation, job.seed).map_err(|e| e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_outputs(dir: &Path, outcome: &TrialOutcome, report: &RunReport) -> Result<(), CliError> {
    let r = &outcome.refinement;
    let png = |img: &Image, name: &str| img.write_png(&dir.join(name)).map_err(|e| io_err(&dir.join(name), e));
    png(&r.initial_image, "pre.png")?;
    png(&r.image, "post.png")?;
    png(&outcome.warp.image, "warp.png")?;
    for (i, img) in &r.snapshots {
        png(img, &format!("snapshot_{i:03}.png"))?;
    }
    r.trace.write_json(&dir.join("trace.json")).map_err(|e| io_err(&dir.join("trace.json"), e))?;
    for (h, name) in [(&outcome.pre_histogram, "pre_histogram.csv"), (&outcome.post_histogram, "post_histogram.csv")] {
        if let Some(h) = h {
            h.write_csv(&dir.join(name)).map_err(|e| io_err(&dir.join(name), e))?;
        }
    }
    write_json(&dir.join("report.json"), report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))? + "\n";
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Runs every scene × target × seed of `manifest`, writing one directory per
/// run plus `summary.json`. Fails with a runtime error (after writing all
/// outputs) if any run aborted.
pub fn cmd_refine(manifest: &RunManifest, jobs: usize) -> Result<RunSummary, CliError> {
    let scenes = load_scenes(manifest)?;
    std::fs::create_dir_all(&manifest.output_dir).map_err(|e| CliError::Usage(format!("{}: {e}", manifest.output_dir.display())))?;
    let work = jobs_of(manifest, &scenes);
    let reports: Vec<Result<RunReport, CliError>> = thread_pool(jobs)?.install(|| {
        work.par_iter()
            .map(|job| {
                let dir = manifest.output_dir.join(job.dir_name());
                std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                match run_job(manifest, &scenes, job, &manifest.refinement) {
                    Ok(outcome) => {
                        let report = RunReport::succeeded(job, &outcome);
                        write_outputs(&dir, &outcome, &report)?;
                        Ok(report)
                    }
                    Err(e) => {
                        let report = RunReport::failed(job, e);
                        write_json(&dir.join("report.json"), &report)?;
                        Ok(report)
                    }
                }
            })
            .collect()
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary = RunSummary::new(reports);
    write_json(&manifest.output_dir.join("summary.json"), &summary)?;
    if summary.failed > 0 {
        return Err(CliError::Runtime(format!(
            "{} of {} runs failed; see {}",
            summary.failed,
            summary.runs.len(),
            manifest.output_dir.join("summary.json").display()
        )));
    }
    Ok(summary)
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub policy: FilterPolicy,
    /// Empty for NoFiltering, which ignores the threshold.
    pub threshold: Option<f64>,
    pub lambda_rgb: f64,
    pub runs: usize,
    pub failures: usize,
    pub mean_initial_loss: Option<f64>,
    pub mean_final_loss: Option<f64>,
    pub mean_best_loss: Option<f64>,
    pub mean_final_epipolar: Option<f64>,
    #[serde(rename = "mean_R_dist_deg")]
    pub mean_r_dist_deg: Option<f64>,
    #[serde(rename = "mean_T_dist_deg")]
    pub mean_t_dist_deg: Option<f64>,
    pub mean_epi_px: Option<f64>,
    pub mean_masked_psnr_db: Option<f64>,
}

/// Threshold used for the λ sweep rows.
pub const ABLATION_LAMBDA_THRESHOLD: f64 = 0.15;

/// The configurations an ablation evaluates: every policy × threshold (one
/// row for NoFiltering), then a FixedAtInit sweep over `lambdas`.
pub fn ablation_cells(base: &RefinementConfig, policies: &[FilterPolicy], thresholds: &[f64], lambdas: &[f64]) -> Vec<(RefinementConfig, Option<f64>)> {
    let mut cells = Vec::new();
    for &policy in policies {
        if policy == FilterPolicy::NoFiltering {
            cells.push((RefinementConfig { policy, confidence_threshold: 0.0, ..*base }, None));
            continue;
        }
        for &t in thresholds {
            cells.push((RefinementConfig { policy, confidence_threshold: t, ..*base }, Some(t)));
        }
    }
    for &lambda_rgb in lambdas {
        let config = RefinementConfig {
            policy: FilterPolicy::FixedAtInit,
            confidence_threshold: ABLATION_LAMBDA_THRESHOLD,
            lambda_rgb,
            ..*base
        };
        cells.push((config, Some(ABLATION_LAMBDA_THRESHOLD)));
    }
    cells
}

/// Sweeps the ablation cells over every run of `manifest` and writes the
/// rows to `out` as CSV.
pub fn cmd_ablate(manifest: &RunManifest, policies: &[FilterPolicy], thresholds: &[f64], lambdas: &[f64], jobs: usize, out: &Path) -> Result<Vec<AblationRow>, CliError> {
    for cell in ablation_cells(&manifest.refinement, policies, thresholds, lambdas) {
        cell.0.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let scenes = load_scenes(manifest)?;
    let work = jobs_of(manifest, &scenes);
    let cells = ablation_cells(&manifest.refinement, policies, thresholds, lambdas);
    let pool = thread_pool(jobs)?;
    let rows: Vec<AblationRow> = cells
        .iter()
        .map(|(config, threshold)| {
            let results: Vec<Result<TrialOutcome, String>> = pool.install(|| work.par_iter().map(|job| run_job(manifest, &scenes, job, config)).collect());
            let ok: Vec<&TrialOutcome> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
            let trace_mean = |f: &dyn Fn(&TrialOutcome) -> Option<f64>| mean_of(ok.iter().filter_map(|o| f(o)));
            AblationRow {
                policy: config.policy,
                threshold: *threshold,
                lambda_rgb: config.lambda_rgb,
                runs: results.len(),
                failures: results.len() - ok.len(),
                mean_initial_loss: trace_mean(&|o| o.refinement.trace.initial_loss()),
                mean_final_loss: trace_mean(&|o| o.refinement.trace.final_loss()),
                mean_best_loss: trace_mean(&|o| o.refinement.trace.best_loss()),
                mean_final_epipolar: trace_mean(&|o| o.refinement.trace.entries.last()?.epipolar),
                mean_r_dist_deg: trace_mean(&|o| o.post.r_dist_deg),
                mean_t_dist_deg: trace_mean(&|o| o.post.t_dist_deg),
                mean_epi_px: trace_mean(&|o| o.post.epi_mean_px),
                mean_masked_psnr_db: trace_mean(&|o| o.post.masked_psnr_db),
            }
        })
        .collect();
    write_csv(out, &rows)?;
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Inputs of `epirefine evaluate`.
#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub reference: PathBuf,
    pub generated: PathBuf,
    pub reference_camera: PathBuf,
    pub target_camera: PathBuf,
    /// Scene used to build the warp mask for masked PSNR/SSIM.
    pub scene: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Evaluates one generated image against a reference and a target camera,
/// writing `report.json` and `histogram.csv` to `out_dir`.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalReport, CliError> {
    let usage = |p: &Path, e: &dyn std::fmt::Display| CliError::Usage(format!("{}: {e}", p.display()));
    let read_camera = |p: &Path| -> Result<CameraJson, CliError> {
        let text = std::fs::read_to_string(p).map_err(|e| usage(p, &e))?;
        serde_json::from_str(&text).map_err(|e| usage(p, &e))
    };
    let reference = Image::read_png(&args.reference).map_err(|e| usage(&args.reference, &e))?;
    let generated = Image::read_png(&args.generated).map_err(|e| usage(&args.generated, &e))?;
    let (ref_cam, tgt_cam) = (read_camera(&args.reference_camera)?, read_camera(&args.target_camera)?);
    let (ref_pose, tgt_pose) = (
        ref_cam.pose().map_err(|e| usage(&args.reference_camera, &e))?,
        tgt_cam.pose().map_err(|e| usage(&args.target_camera, &e))?,
    );
    let (k_ref, k_gen) = (
        ref_cam.intrinsics().map_err(|e| usage(&args.reference_camera, &e))?,
        tgt_cam.intrinsics().map_err(|e| usage(&args.target_camera, &e))?,
    );
    if (reference.width, reference.height) != (k_ref.width, k_ref.height) || (generated.width, generated.height) != (k_gen.width, k_gen.height) {
        return Err(CliError::Usage("image sizes do not match the camera intrinsics".into()));
    }
    let config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(p, &e))?;
            serde_json::from_str(&text).map_err(|e| usage(p, &e))?
        }
        None => EvalConfig::default(),
    };
    let warp = match &args.scene {
        Some(p) => {
            let scene = Scene::read_json(p).map_err(|e| usage(p, &e))?;
            Some(warp_reference(&scene, &ref_pose, &reference, &tgt_pose, &k_gen))
        }
        None => None,
    };
    let gt = RelativePose::between(&ref_pose, &tgt_pose);
    let eval = evaluate_view(&reference, &generated, &k_ref, &k_gen, &gt, warp.as_ref(), &config).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| usage(&args.out_dir, &e))?;
    write_json(&args.out_dir.join("report.json"), &eval.report)?;
    if let Some(h) = &eval.histogram {
        let path = args.out_dir.join("histogram.csv");
        h.write_csv(&path).map_err(|e| io_err(&path, e))?;
    }
    Ok(eval.report)
}
