use nalgebra::Vector3;

use crate::epigeo::{Intrinsics, Pose};
use crate::imageio::Image;

use super::DepthMap;

/// Faces seen more obliquely than this are dropped before warping.
pub const MAX_FACE_ANGLE_DEG: f64 = 70.0;
const Z_NEAR: f64 = 1e-6;

/// Triangle mesh in world coordinates. Every vertex remembers the reference
/// pixel it was unprojected from, which supplies its colour.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub pixels: Vec<(usize, usize)>,
    pub faces: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    pub mask: Vec<bool>,
}

impl WarpResult {
    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// One vertex per valid pixel and two triangles per fully valid 2×2 quad.
pub fn depth_to_mesh(depth: &DepthMap, k: &Intrinsics, ref_pose: &Pose) -> Mesh {
    let to_world = ref_pose.inverse();
    let mut index = vec![usize::MAX; depth.width * depth.height];
    let mut vertices = Vec::new();
    let mut pixels = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(z) = depth.get(x, y) {
                index[y * depth.width + x] = vertices.len();
                vertices.push(to_world.transform(&k.unproject(x as f64, y as f64, z)));
                pixels.push((x, y));
            }
        }
    }
    let mut faces = Vec::new();
    for y in 0..depth.height.saturating_sub(1) {
        for x in 0..depth.width.saturating_sub(1) {
            let a = index[y * depth.width + x];
            let b = index[y * depth.width + x + 1];
            let c = index[(y + 1) * depth.width + x];
            let d = index[(y + 1) * depth.width + x + 1];
            if [a, b, c, d].contains(&usize::MAX) {
                continue;
            }
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    Mesh { vertices, pixels, faces }
}

/// Unit normal of a face, oriented towards `eye`.
fn facing_normal(mesh: &Mesh, face: &[usize; 3], eye: &Vector3<f64>) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let [a, b, c] = face.map(|i| mesh.vertices[i]);
    let n = (b - a).cross(&(c - a));
    let centroid = (a + b + c) / 3.0;
    let to_eye = eye - centroid;
    if n.norm() == 0.0 || to_eye.norm() == 0.0 {
        return None;
    }
    let n = n.normalize();
    let to_eye = to_eye.normalize();
    Some((if n.dot(&to_eye) < 0.0 { -n } else { n }, to_eye))
}

/// Removes faces whose normal makes an angle greater than `max_angle_deg`
/// with the direction from the face centroid to `camera_center`.
pub fn cull_faces(mesh: &Mesh, camera_center: &Vector3<f64>, max_angle_deg: f64) -> Mesh {
    let faces = mesh
        .faces
        .iter()
        .filter(|f| {
            facing_normal(mesh, f, camera_center).is_some_and(|(n, to_eye)| n.dot(&to_eye).clamp(-1.0, 1.0).acos().to_degrees() <= max_angle_deg)
        })
        .copied()
        .collect();
    Mesh {
        vertices: mesh.vertices.clone(),
        pixels: mesh.pixels.clone(),
        faces,
    }
}

/// Warps the reference view of `scene` into `target_pose` through its
/// rendered depth, culling faces steeper than [`MAX_FACE_ANGLE_DEG`].
pub fn warp_reference(scene: &super::Scene, ref_pose: &Pose, ref_image: &Image, target_pose: &Pose, k: &Intrinsics) -> WarpResult {
    let depth = super::render_depth(scene, ref_pose, k);
    let mesh = cull_faces(&depth_to_mesh(&depth, k, ref_pose), &ref_pose.center(), MAX_FACE_ANGLE_DEG);
    render_warp(&mesh, ref_image, target_pose, k)
}

/// Z-buffered rasterization of `mesh` into the target view. Colours come from
/// `ref_image` at each vertex's originating pixel and are interpolated with
/// perspective-correct barycentrics.
pub fn render_warp(mesh: &Mesh, ref_image: &Image, target_pose: &Pose, k: &Intrinsics) -> WarpResult {
    let (w, h) = (k.width, k.height);
    let ch = ref_image.channels;
    let projected: Vec<Option<(f64, f64, f64)>> = mesh
        .vertices
        .iter()
        .map(|v| {
            let p = target_pose.transform(v);
            (p.z > Z_NEAR).then(|| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
        })
        .collect();
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut image = Image::zeros(w, h, ch);
    let mut mask = vec![false; w * h];
    for face in &mesh.faces {
        let [Some(p0), Some(p1), Some(p2)] = face.map(|i| projected[i]) else {
            continue;
        };
        let area = (p1.0 - p0.0) * (p2.1 - p0.1) - (p2.0 - p0.0) * (p1.1 - p0.1);
        if area.abs() < 1e-12 {
            continue;
        }
        let xs = [p0.0, p1.0, p2.0];
        let ys = [p0.1, p1.1, p2.1];
        let lo_x = xs.iter().cloned().fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi_x = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
        let lo_y = ys.iter().cloned().fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi_y = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let colors = face.map(|i| {
            let (px, py) = mesh.pixels[i];
            ref_image.pixel(px, py).to_vec()
        });
        let tol = -1e-9;
        for py in lo_y as usize..=hi_y as usize {
            for px in lo_x as usize..=hi_x as usize {
                let (x, y) = (px as f64, py as f64);
                let l1 = ((x - p0.0) * (p2.1 - p0.1) - (p2.0 - p0.0) * (y - p0.1)) / area;
                let l2 = ((p1.0 - p0.0) * (y - p0.1) - (x - p0.0) * (p1.1 - p0.1)) / area;
                let l0 = 1.0 - l1 - l2;
                if l0 < tol || l1 < tol || l2 < tol {
                    continue;
                }
                let q = [l0 / p0.2, l1 / p1.2, l2 / p2.2];
                let inv_z = q[0] + q[1] + q[2];
                let z = 1.0 / inv_z;
                let idx = py * w + px;
                if z >= zbuf[idx] {
                    continue;
                }
                zbuf[idx] = z;
                mask[idx] = true;
                let out = image.pixel_mut(px, py);
                for c in 0..ch {
                    out[c] = (q[0] * colors[0][c] + q[1] * colors[1][c] + q[2] * colors[2][c]) / inv_z;
                }
            }
        }
    }
    WarpResult { image, mask }
}
