//! C ABI over the core library.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every function returns an
//! [`EpiStatus`]; on failure a message is kept per thread and can be read
//! with [`epi_last_error`]. Panics are caught and reported as
//! `EPI_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use epirefine::cli::trial::{run_trial, GeneratorSpec, TrialSetup};
use epirefine::epigeo::{symmetric_epipolar_distance, FundamentalMatrix, Intrinsics, Pose, RelativePose};
use epirefine::evalkit::{evaluate_view, EvalConfig, EvalReport};
use epirefine::imageio::Image;
use epirefine::matcher::FilterPolicy;
use epirefine::refine::RefinementConfig;
use epirefine::scene::{make_scene, render, Scene};
use nalgebra::{Matrix3, Point2, Vector3};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpiStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Too few correspondences, or no pose could be estimated.
    Matching = 4,
    /// Geometry without a baseline, or otherwise degenerate.
    Degenerate = 5,
    Runtime = 6,
    Panic = 7,
}

/// Pinhole camera: world-to-camera rotation (row-major) and translation,
/// plus intrinsics and image size.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EpiCamera {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Evaluation scalars; fields that could not be computed are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EpiReport {
    pub r_dist_deg: f64,
    pub t_dist_deg: f64,
    pub epi_mean_px: f64,
    pub epi_median_px: f64,
    pub masked_psnr_db: f64,
    pub masked_ssim: f64,
    pub inliers: u32,
}

/// Filtering policy for matches during refinement.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpiPolicy {
    NoFiltering = 0,
    FixedAtInit = 1,
    Adaptive = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EpiRefineConfig {
    pub iterations: u32,
    pub learning_rate: f64,
    pub lambda_rgb: f64,
    pub confidence_threshold: f64,
    pub policy: EpiPolicy,
}

/// Outcome of one pose-latent refinement trial.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EpiTrialResult {
    pub pre: EpiReport,
    pub post: EpiReport,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: u32,
}

/// Opaque synthetic scene.
pub struct EpiScene(Scene);

/// Opaque RGB image with values in [0, 1].
pub struct EpiImage(Image);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: EpiStatus, msg: impl Into<String>) -> EpiStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> EpiStatus) -> EpiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(EpiStatus::Panic, msg)
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(EpiStatus::NullArgument, concat!(stringify!($p), " is null"));
        })+
    };
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, EpiStatus> {
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(EpiStatus::InvalidArgument, "path is not UTF-8")),
    }
}

fn camera(c: &EpiCamera) -> Result<(Pose, Intrinsics), EpiStatus> {
    let r = Matrix3::from_row_slice(&c.rotation);
    let pose = Pose::new(r, Vector3::from(c.translation)).map_err(|e| fail(EpiStatus::InvalidArgument, e.to_string()))?;
    let k = Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width as usize, c.height as usize).map_err(|e| fail(EpiStatus::InvalidArgument, e.to_string()))?;
    Ok((pose, k))
}

fn report(r: &EvalReport) -> EpiReport {
    let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
    EpiReport {
        r_dist_deg: v(r.r_dist_deg),
        t_dist_deg: v(r.t_dist_deg),
        epi_mean_px: v(r.epi_mean_px),
        epi_median_px: v(r.epi_median_px),
        masked_psnr_db: v(r.masked_psnr_db),
        masked_ssim: v(r.masked_ssim),
        inliers: r.inliers as u32,
    }
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn epi_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |m| m.as_bytes());
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Generates a scene with `n` primitives at depths `[depth_min, depth_max]`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn epi_scene_generate(seed: u64, n: u32, depth_min: f64, depth_max: f64, out: *mut *mut EpiScene) -> EpiStatus {
    guard(|| {
        non_null!(out);
        match make_scene(seed, n as usize, (depth_min, depth_max)) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(EpiScene(s)));
                EpiStatus::Ok
            }
            Err(e) => fail(EpiStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Loads a scene JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn epi_scene_load(path: *const c_char, out: *mut *mut EpiScene) -> EpiStatus {
    guard(|| {
        non_null!(path, out);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Scene::read_json(&path) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(EpiScene(s)));
                EpiStatus::Ok
            }
            Err(e) => fail(EpiStatus::Io, e.to_string()),
        }
    })
}

/// Writes a scene as JSON.
///
/// # Safety
/// `scene` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn epi_scene_save(scene: *const EpiScene, path: *const c_char) -> EpiStatus {
    guard(|| {
        non_null!(scene, path);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match (*scene).0.write_json(&path) {
            Ok(()) => EpiStatus::Ok,
            Err(e) => fail(EpiStatus::Io, e.to_string()),
        }
    })
}

/// Number of primitives, or 0 for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn epi_scene_len(scene: *const EpiScene) -> u32 {
    scene.as_ref().map_or(0, |s| s.0.len() as u32)
}

/// Releases a scene; null is ignored.
///
/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn epi_scene_free(scene: *mut EpiScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Renders `scene` from `camera`.
///
/// # Safety
/// Pointers must be valid; `out` receives a new image handle.
#[no_mangle]
pub unsafe extern "C" fn epi_render(scene: *const EpiScene, camera_in: *const EpiCamera, out: *mut *mut EpiImage) -> EpiStatus {
    guard(|| {
        non_null!(scene, camera_in, out);
        let (pose, k) = match camera(&*camera_in) {
            Ok(c) => c,
            Err(s) => return s,
        };
        *out = Box::into_raw(Box::new(EpiImage(render(&(*scene).0, &pose, &k))));
        EpiStatus::Ok
    })
}

/// Loads an 8-bit RGB PNG.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn epi_image_load_png(path: *const c_char, out: *mut *mut EpiImage) -> EpiStatus {
    guard(|| {
        non_null!(path, out);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Image::read_png(&path) {
            Ok(img) => {
                *out = Box::into_raw(Box::new(EpiImage(img)));
                EpiStatus::Ok
            }
            Err(e) => fail(EpiStatus::Io, e.to_string()),
        }
    })
}

/// Writes an image as an 8-bit PNG.
///
/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn epi_image_save_png(image: *const EpiImage, path: *const c_char) -> EpiStatus {
    guard(|| {
        non_null!(image, path);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match (*image).0.write_png(&path) {
            Ok(()) => EpiStatus::Ok,
            Err(e) => fail(EpiStatus::Io, e.to_string()),
        }
    })
}

/// Width, height and channel count of an image.
///
/// # Safety
/// `image` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn epi_image_size(image: *const EpiImage, width: *mut u32, height: *mut u32, channels: *mut u32) -> EpiStatus {
    guard(|| {
        non_null!(image, width, height, channels);
        let img = &(*image).0;
        *width = img.width as u32;
        *height = img.height as u32;
        *channels = img.channels as u32;
        EpiStatus::Ok
    })
}

/// Copies row-major, channel-interleaved pixel values into `buf`, which
/// must hold `width * height * channels` doubles.
///
/// # Safety
/// `image` must be a live handle and `buf` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn epi_image_copy(image: *const EpiImage, buf: *mut f64, len: usize) -> EpiStatus {
    guard(|| {
        non_null!(image, buf);
        let data = &(*image).0.data;
        if len < data.len() {
            return fail(EpiStatus::InvalidArgument, format!("buffer holds {len} values, image has {}", data.len()));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        EpiStatus::Ok
    })
}

/// Releases an image; null is ignored.
///
/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn epi_image_free(image: *mut EpiImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Fundamental matrix (row-major, unit Frobenius norm) mapping reference
/// pixels to epipolar lines in the target image.
///
/// # Safety
/// Camera pointers must be valid and `out` must hold 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn epi_fundamental(reference: *const EpiCamera, target: *const EpiCamera, out: *mut f64) -> EpiStatus {
    guard(|| {
        non_null!(reference, target, out);
        let ((rp, rk), (tp, tk)) = match (camera(&*reference), camera(&*target)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match FundamentalMatrix::from_relative(&RelativePose::between(&rp, &tp), &rk, &tk) {
            Ok(f) => {
                let m = f.matrix();
                for i in 0..3 {
                    for j in 0..3 {
                        *out.add(3 * i + j) = m[(i, j)];
                    }
                }
                EpiStatus::Ok
            }
            Err(e) => fail(EpiStatus::Degenerate, e.to_string()),
        }
    })
}

/// Symmetric epipolar distance `d(y, Fx) + d(x, Fᵀy)` in pixels.
///
/// # Safety
/// `f` must hold 9 doubles, `x` and `y` 2 each, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn epi_symmetric_distance(f: *const f64, x: *const f64, y: *const f64, out: *mut f64) -> EpiStatus {
    guard(|| {
        non_null!(f, x, y, out);
        let m = Matrix3::from_row_slice(std::slice::from_raw_parts(f, 9));
        let f = match FundamentalMatrix::from_matrix(m) {
            Ok(f) => f,
            Err(e) => return fail(EpiStatus::InvalidArgument, e.to_string()),
        };
        let (x, y) = (Point2::new(*x, *x.add(1)), Point2::new(*y, *y.add(1)));
        match symmetric_epipolar_distance(&f, &x, &y) {
            Ok(d) => {
                *out = d;
                EpiStatus::Ok
            }
            Err(e) => fail(EpiStatus::Degenerate, e.to_string()),
        }
    })
}

/// Evaluates `generated` against `reference` for the given cameras with the
/// default evaluation settings (no warp mask, so PSNR/SSIM are NaN).
///
/// # Safety
/// All pointers must be valid; images must match the camera sizes.
#[no_mangle]
pub unsafe extern "C" fn epi_evaluate(
    reference: *const EpiImage,
    generated: *const EpiImage,
    reference_camera: *const EpiCamera,
    target_camera: *const EpiCamera,
    out: *mut EpiReport,
) -> EpiStatus {
    guard(|| {
        non_null!(reference, generated, reference_camera, target_camera, out);
        let ((rp, rk), (tp, tk)) = match (camera(&*reference_camera), camera(&*target_camera)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let (a, b) = (&(*reference).0, &(*generated).0);
        if (a.width, a.height) != (rk.width, rk.height) || (b.width, b.height) != (tk.width, tk.height) {
            return fail(EpiStatus::InvalidArgument, "image sizes do not match the cameras");
        }
        let gt = RelativePose::between(&rp, &tp);
        match evaluate_view(a, b, &rk, &tk, &gt, None, &EvalConfig::default()) {
            Ok(v) => {
                *out = report(&v.report);
                EpiStatus::Ok
            }
            Err(e) => fail(EpiStatus::Matching, e.to_string()),
        }
    })
}

/// Default refinement settings.
#[no_mangle]
pub extern "C" fn epi_refine_config_default() -> EpiRefineConfig {
    let c = RefinementConfig::default();
    EpiRefineConfig {
        iterations: c.iterations as u32,
        learning_rate: c.learning_rate,
        lambda_rgb: c.lambda_rgb,
        confidence_threshold: c.confidence_threshold,
        policy: EpiPolicy::FixedAtInit,
    }
}

/// Runs one pose-latent refinement trial: the target camera orbits the
/// scene pivot by the given angles, the generated view starts from a seeded
/// perturbation within `[perturb_min_deg, perturb_max_deg]`, and both the
/// initial and refined images are evaluated. `post_image` may be null; if
/// not, it receives the refined image.
///
/// # Safety
/// Pointers must be valid (except the optional `post_image`).
#[no_mangle]
pub unsafe extern "C" fn epi_refine_pose_trial(
    scene: *const EpiScene,
    reference_camera: *const EpiCamera,
    azimuth_deg: f64,
    elevation_deg: f64,
    perturb_min_deg: f64,
    perturb_max_deg: f64,
    seed: u64,
    config: *const EpiRefineConfig,
    out: *mut EpiTrialResult,
    post_image: *mut *mut EpiImage,
) -> EpiStatus {
    guard(|| {
        non_null!(scene, reference_camera, config, out);
        let (pose, k) = match camera(&*reference_camera) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let c = &*config;
        let refine_config = RefinementConfig {
            iterations: c.iterations as usize,
            learning_rate: c.learning_rate,
            lambda_rgb: c.lambda_rgb,
            confidence_threshold: c.confidence_threshold,
            policy: match c.policy {
                EpiPolicy::NoFiltering => FilterPolicy::NoFiltering,
                EpiPolicy::FixedAtInit => FilterPolicy::FixedAtInit,
                EpiPolicy::Adaptive => FilterPolicy::Adaptive,
            },
            ..RefinementConfig::default()
        };
        if let Err(e) = refine_config.validate() {
            return fail(EpiStatus::InvalidArgument, e.to_string());
        }
        let generator = GeneratorSpec::PoseLatent {
            perturbation_deg: [perturb_min_deg, perturb_max_deg],
        };
        let setup = TrialSetup::new((*scene).0.clone(), pose, k, azimuth_deg, elevation_deg);
        match run_trial(&setup, &generator, &refine_config, &EvalConfig::default(), seed) {
            Ok(o) => {
                let t = &o.refinement.trace;
                *out = EpiTrialResult {
                    pre: report(&o.pre),
                    post: report(&o.post),
                    initial_loss: t.initial_loss().unwrap_or(f64::NAN),
                    best_loss: t.best_loss().unwrap_or(f64::NAN),
                    best_iteration: t.best_iteration as u32,
                };
                if !post_image.is_null() {
                    *post_image = Box::into_raw(Box::new(EpiImage(o.refinement.image)));
                }
                EpiStatus::Ok
            }
            Err(e) => {
                use epirefine::cli::trial::TrialError;
                let status = match &e {
                    TrialError::Generator(_) | TrialError::Schedule(_) => EpiStatus::InvalidArgument,
                    TrialError::Refine(epirefine::refine::RefineError::Match(_)) => EpiStatus::Matching,
                    TrialError::Refine(epirefine::refine::RefineError::Config(_)) => EpiStatus::InvalidArgument,
                    _ => EpiStatus::Runtime,
                };
                fail(status, e.to_string())
            }
        }
    })
}
