use std::ffi::{c_char, CString};
use std::ptr;

use epirefine::epigeo::{Intrinsics, Pose};
use epirefine::scene::{make_scene, orbit_pose};
use epirefine_ffi::*;

fn camera(pose: &Pose, size: u32) -> EpiCamera {
    let k = Intrinsics::standard(size as usize, size as usize);
    let mut rotation = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            rotation[3 * i + j] = pose.rotation[(i, j)];
        }
    }
    EpiCamera {
        rotation,
        translation: pose.translation.into(),
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: size,
        height: size,
    }
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { epi_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    assert_eq!(bytes.len(), n.min(255));
    String::from_utf8(bytes).unwrap()
}

fn generate(seed: u64, n: u32) -> *mut EpiScene {
    let mut scene = ptr::null_mut();
    assert_eq!(unsafe { epi_scene_generate(seed, n, 2.0, 4.0, &mut scene) }, EpiStatus::Ok);
    scene
}

fn target(seed: u64, n: usize, azimuth_deg: f64, elevation_deg: f64) -> Pose {
    let pivot = make_scene(seed, n, (2.0, 4.0)).unwrap().pivot();
    orbit_pose(&Pose::identity(), &pivot, azimuth_deg, elevation_deg)
}

#[test]
fn scene_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("s.json").to_str().unwrap()).unwrap();
    let scene = generate(3, 300);
    unsafe {
        assert_eq!(epi_scene_len(scene), 300);
        assert_eq!(epi_scene_save(scene, path.as_ptr()), EpiStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(epi_scene_load(path.as_ptr(), &mut loaded), EpiStatus::Ok);
        assert_eq!(epi_scene_len(loaded), 300);
        epi_scene_free(loaded);
        epi_scene_free(scene);
    }
}

#[test]
fn render_copy_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate(1, 300);
    let cam = camera(&Pose::identity(), 48);
    unsafe {
        let mut image = ptr::null_mut();
        assert_eq!(epi_render(scene, &cam, &mut image), EpiStatus::Ok);
        let (mut w, mut h, mut c) = (0, 0, 0);
        assert_eq!(epi_image_size(image, &mut w, &mut h, &mut c), EpiStatus::Ok);
        assert_eq!((w, h, c), (48, 48, 3));

        let mut buf = vec![0.0; 48 * 48 * 3];
        assert_eq!(epi_image_copy(image, buf.as_mut_ptr(), buf.len() - 1), EpiStatus::InvalidArgument);
        assert_eq!(epi_image_copy(image, buf.as_mut_ptr(), buf.len()), EpiStatus::Ok);
        assert!(buf.iter().all(|v| (0.0..=1.0).contains(v)));

        let path = CString::new(dir.path().join("r.png").to_str().unwrap()).unwrap();
        assert_eq!(epi_image_save_png(image, path.as_ptr()), EpiStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(epi_image_load_png(path.as_ptr(), &mut loaded), EpiStatus::Ok);
        let mut back = vec![0.0; buf.len()];
        assert_eq!(epi_image_copy(loaded, back.as_mut_ptr(), back.len()), EpiStatus::Ok);
        assert!(buf.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        epi_image_free(loaded);
        epi_image_free(image);
        epi_scene_free(scene);
    }
}

#[test]
fn fundamental_matrix_satisfies_projected_points() {
    let pose = target(0, 200, 10.0, 5.0);
    let (a, b) = (camera(&Pose::identity(), 128), camera(&pose, 128));
    let mut f = [0.0; 9];
    unsafe {
        assert_eq!(epi_fundamental(&a, &b, f.as_mut_ptr()), EpiStatus::Ok);
        assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let k = Intrinsics::standard(128, 128);
        let p = nalgebra::Vector3::new(0.2, -0.1, 3.0);
        let (x, y) = (k.project(&p).unwrap(), k.project(&pose.transform(&p)).unwrap());
        let mut d = f64::NAN;
        assert_eq!(epi_symmetric_distance(f.as_ptr(), [x.x, x.y].as_ptr(), [y.x, y.y].as_ptr(), &mut d), EpiStatus::Ok);
        assert!(d < 1e-6, "{d}");

        assert_eq!(epi_fundamental(&a, &a, f.as_mut_ptr()), EpiStatus::Degenerate);
        assert!(!last_error().is_empty());
    }
}

#[test]
fn evaluate_reports_the_rendered_pose() {
    let scene = generate(2, 800);
    let pose = target(2, 800, 10.0, 5.0);
    let (a, b) = (camera(&Pose::identity(), 128), camera(&pose, 128));
    unsafe {
        let (mut reference, mut generated) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(epi_render(scene, &a, &mut reference), EpiStatus::Ok);
        assert_eq!(epi_render(scene, &b, &mut generated), EpiStatus::Ok);
        let mut report = std::mem::zeroed::<EpiReport>();
        assert_eq!(epi_evaluate(reference, generated, &a, &b, &mut report), EpiStatus::Ok);
        assert!(report.r_dist_deg < 1.0, "{report:?}");
        assert!(report.inliers >= 8);
        assert!(report.masked_psnr_db.is_nan());

        let small = camera(&Pose::identity(), 64);
        assert_eq!(epi_evaluate(reference, generated, &small, &b, &mut report), EpiStatus::InvalidArgument);
        epi_image_free(reference);
        epi_image_free(generated);
        epi_scene_free(scene);
    }
}

#[test]
fn refinement_trial_fills_the_result() {
    let scene = generate(4, 800);
    let cam = camera(&Pose::identity(), 96);
    let config = EpiRefineConfig { iterations: 4, ..epi_refine_config_default() };
    unsafe {
        let mut result = std::mem::zeroed::<EpiTrialResult>();
        let mut post = ptr::null_mut();
        let status = epi_refine_pose_trial(scene, &cam, 10.0, 5.0, 2.0, 8.0, 7, &config, &mut result, &mut post);
        assert_eq!(status, EpiStatus::Ok, "{}", last_error());
        assert!(result.best_loss <= result.initial_loss);
        assert!(result.best_iteration <= 4);
        assert!(!post.is_null());
        epi_image_free(post);

        let bad = EpiRefineConfig { learning_rate: -1.0, ..config };
        assert_eq!(epi_refine_pose_trial(scene, &cam, 10.0, 5.0, 2.0, 8.0, 7, &bad, &mut result, ptr::null_mut()), EpiStatus::InvalidArgument);
        epi_scene_free(scene);
    }
}

#[test]
fn invalid_arguments_are_reported() {
    unsafe {
        assert_eq!(epi_scene_generate(0, 300, 2.0, 4.0, ptr::null_mut()), EpiStatus::NullArgument);
        assert_eq!(last_error(), "out is null");
        let mut scene = ptr::null_mut();
        assert_eq!(epi_scene_generate(0, 10, 2.0, 4.0, &mut scene), EpiStatus::InvalidArgument);
        assert!(scene.is_null());

        let missing = CString::new("/nonexistent/scene.json").unwrap();
        assert_eq!(epi_scene_load(missing.as_ptr(), &mut scene), EpiStatus::Io);

        let mut cam = camera(&Pose::identity(), 32);
        cam.rotation[0] = 2.0;
        let mut image = ptr::null_mut();
        let real = generate(0, 300);
        assert_eq!(epi_render(real, &cam, &mut image), EpiStatus::InvalidArgument);
        epi_scene_free(real);

        assert_eq!(epi_scene_len(ptr::null()), 0);
        epi_scene_free(ptr::null_mut());
        epi_image_free(ptr::null_mut());
        assert!(epi_last_error(ptr::null_mut(), 0) > 0);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/epirefine.h");
    let source = include_str!("../src/lib.rs");
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from the header");
    }
    for ty in ["EpiScene", "EpiImage", "EpiCamera", "EpiReport", "EpiTrialResult", "EpiRefineConfig"] {
        assert!(header.contains(ty), "{ty} missing from the header");
    }
}
