use std::rc::Rc;

use crate::diffcore::{CustomOp, DiffError, Tape, Tensor, Var};
use crate::epigeo::{Intrinsics, Pose};
use crate::imageio::Image;

use super::Scene;

/// Added to the total splat weight before normalizing.
pub const SPLAT_EPS: f64 = 1e-6;
/// Primitives closer than this to the camera plane are dropped.
const Z_NEAR: f64 = 1e-3;
/// Weights below exp(-40) are not evaluated.
const CUTOFF_EXPONENT: f64 = 40.0;

/// Primitive centres in the camera frame of `pose`, shape `[N, 3]`.
pub fn camera_points(scene: &Scene, pose: &Pose) -> Tensor {
    let data = scene
        .primitives
        .iter()
        .flat_map(|p| {
            let q = pose.transform(&p.position.into());
            [q.x, q.y, q.z]
        })
        .collect();
    Tensor::new(&[scene.len(), 3], data).expect("3 values per primitive")
}

/// Projected footprint of one primitive, or `None` when it is behind the
/// camera or entirely outside the image.
struct Footprint {
    u: f64,
    v: f64,
    sigma: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn footprint(p: &[f64], radius: f64, k: &Intrinsics) -> Option<Footprint> {
    let (x, y, z) = (p[0], p[1], p[2]);
    if z <= Z_NEAR {
        return None;
    }
    let u = k.fx * x / z + k.cx;
    let v = k.fy * y / z + k.cy;
    let sigma = k.fx * radius / z;
    let reach = sigma * (2.0 * CUTOFF_EXPONENT).sqrt();
    let (w, h) = (k.width as f64, k.height as f64);
    if u + reach < 0.0 || v + reach < 0.0 || u - reach > w - 1.0 || v - reach > h - 1.0 {
        return None;
    }
    Some(Footprint {
        u,
        v,
        sigma,
        x0: (u - reach).ceil().max(0.0) as usize,
        x1: (u + reach).floor().min(w - 1.0) as usize,
        y0: (v - reach).ceil().max(0.0) as usize,
        y1: (v + reach).floor().min(h - 1.0) as usize,
    })
}

impl Footprint {
    /// Visits `(pixel index, px, py, weight)` for every pixel in the window.
    fn for_each(&self, width: usize, mut f: impl FnMut(usize, f64, f64, f64)) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        for py in self.y0..=self.y1 {
            let dy = py as f64 - self.v;
            for px in self.x0..=self.x1 {
                let dx = px as f64 - self.u;
                let e = (dx * dx + dy * dy) * inv;
                if e <= CUTOFF_EXPONENT {
                    f(py * width + px, dx, dy, (-e).exp());
                }
            }
        }
    }
}

pub(super) struct SplatFrame {
    pub image: Vec<f64>,
    pub weight_sum: Vec<f64>,
    /// Index of the highest-weight primitive per pixel.
    pub dominant: Vec<Option<usize>>,
}

pub(super) fn splat_forward(points: &[f64], scene: &Scene, k: &Intrinsics) -> SplatFrame {
    let n_px = k.width * k.height;
    let mut acc = vec![0.0; n_px * 3];
    let mut weight_sum = vec![0.0; n_px];
    let mut best = vec![0.0; n_px];
    let mut dominant = vec![None; n_px];
    for (i, prim) in scene.primitives.iter().enumerate() {
        let Some(fp) = footprint(&points[3 * i..3 * i + 3], prim.radius, k) else {
            continue;
        };
        fp.for_each(k.width, |p, _, _, w| {
            weight_sum[p] += w;
            for c in 0..3 {
                acc[3 * p + c] += w * prim.color[c];
            }
            if w > best[p] {
                best[p] = w;
                dominant[p] = Some(i);
            }
        });
    }
    for (p, s) in weight_sum.iter().enumerate() {
        for c in 0..3 {
            acc[3 * p + c] /= s + SPLAT_EPS;
        }
    }
    SplatFrame {
        image: acc,
        weight_sum,
        dominant,
    }
}

/// Renders `scene` seen from `pose`: each pixel is the weight-normalized mix of
/// primitive colours with isotropic Gaussian weights of width `fx·r/z`.
pub fn render(scene: &Scene, pose: &Pose, k: &Intrinsics) -> Image {
    let points = camera_points(scene, pose);
    let frame = splat_forward(points.data(), scene, k);
    Image::new(k.width, k.height, 3, frame.image).expect("sized render")
}

/// Differentiable render from camera-frame primitive centres `[N, 3]` to an
/// `[H, W, 3]` image.
pub fn render_var<'t>(tape: &'t Tape, scene: &Scene, points: Var<'t>, k: &Intrinsics) -> Result<Var<'t>, DiffError> {
    let shape = points.shape();
    if shape != [scene.len(), 3] {
        return Err(DiffError::ShapeMismatch {
            op: "splat",
            lhs: shape,
            rhs: vec![scene.len(), 3],
        });
    }
    let frame = splat_forward(points.value().data(), scene, k);
    let op = SplatOp {
        colors: scene.primitives.iter().map(|p| p.color).collect(),
        radii: scene.primitives.iter().map(|p| p.radius).collect(),
        k: *k,
        weight_sum: frame.weight_sum,
    };
    let out = Tensor::new(&[k.height, k.width, 3], frame.image)?;
    tape.custom(Rc::new(op), &[points], out)
}

/// Backward pass of the splat renderer with respect to camera-frame centres.
pub struct SplatOp {
    colors: Vec<[f64; 3]>,
    radii: Vec<f64>,
    k: Intrinsics,
    weight_sum: Vec<f64>,
}

impl CustomOp for SplatOp {
    fn name(&self) -> &'static str {
        "splat"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let points = inputs[0].data();
        let image = output.data();
        let n_px = self.weight_sum.len();
        // dL/dw_k at pixel p = Σ_c g_c·(color_k,c − I_c) / (S + ε) = Σ_c color_k,c·b_c − a.
        let mut a = vec![0.0; n_px];
        let mut b = vec![0.0; n_px * 3];
        for p in 0..n_px {
            let inv = 1.0 / (self.weight_sum[p] + SPLAT_EPS);
            for c in 0..3 {
                b[3 * p + c] = grad[3 * p + c] * inv;
                a[p] += grad[3 * p + c] * image[3 * p + c] * inv;
            }
        }
        let mut out = vec![0.0; points.len()];
        for (i, (color, &radius)) in self.colors.iter().zip(&self.radii).enumerate() {
            let pt = &points[3 * i..3 * i + 3];
            let Some(fp) = footprint(pt, radius, &self.k) else {
                continue;
            };
            let inv_s2 = 1.0 / (fp.sigma * fp.sigma);
            let (mut du, mut dv, mut ds) = (0.0, 0.0, 0.0);
            fp.for_each(self.k.width, |p, dx, dy, w| {
                let g = color[0] * b[3 * p] + color[1] * b[3 * p + 1] + color[2] * b[3 * p + 2] - a[p];
                let gw = g * w * inv_s2;
                du += gw * dx;
                dv += gw * dy;
                ds += gw * (dx * dx + dy * dy) / fp.sigma;
            });
            let (x, y, z) = (pt[0], pt[1], pt[2]);
            let (fx, fy) = (self.k.fx, self.k.fy);
            out[3 * i] = du * fx / z;
            out[3 * i + 1] = dv * fy / z;
            out[3 * i + 2] = -(du * fx * x + dv * fy * y) / (z * z) - ds * fp.sigma / z;
        }
        vec![Some(out)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_scene, Primitive};

    fn single(position: [f64; 3], radius: f64) -> Scene {
        Scene {
            seed: 0,
            primitives: vec![Primitive {
                position,
                color: [1.0, 0.5, 0.25],
                radius,
            }],
            scale: 1.0,
        }
    }

    #[test]
    fn centred_primitive_peaks_at_principal_point() {
        let k = Intrinsics::standard(33, 33);
        let s = single([0.0, 0.0, 5.0], 0.3);
        let img = render(&s, &Pose::identity(), &k);
        // Weight-normalized colour saturates at the blob colour, so compare total weight instead.
        let frame = splat_forward(camera_points(&s, &Pose::identity()).data(), &s, &k);
        let (best, _) = frame.weight_sum.iter().enumerate().fold((0, 0.0), |acc, (i, &w)| if w > acc.1 { (i, w) } else { acc });
        assert_eq!((best % 33, best / 33), (16, 16));
        assert!((img.pixel(16, 16)[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn behind_camera_is_excluded() {
        let k = Intrinsics::standard(16, 16);
        let img = render(&single([0.0, 0.0, -5.0], 0.3), &Pose::identity(), &k);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rendering_is_bit_identical() {
        let s = make_scene(1, 80, (2.0, 4.0)).unwrap();
        let k = Intrinsics::standard(32, 32);
        let a = render(&s, &Pose::identity(), &k);
        let b = render(&s, &Pose::identity(), &k);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn gradient_wrt_points_matches_finite_differences() {
        let s = make_scene(2, 60, (2.0, 3.0)).unwrap();
        let k = Intrinsics::standard(32, 32);
        let base = camera_points(&s, &Pose::identity());
        let weights: Vec<f64> = (0..32 * 32 * 3).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let objective = |pts: &Tensor| -> f64 {
            let frame = splat_forward(pts.data(), &s, &k);
            frame.image.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let tape = Tape::new();
        let pts = tape.leaf(base.clone().with_grad());
        let img = render_var(&tape, &s, pts, &k).unwrap();
        let wv = tape.constant(Tensor::new(&[32, 32, 3], weights.clone()).unwrap());
        let loss = img.mul(wv).unwrap().sum().unwrap();
        let grad = tape.backward(loss).unwrap().wrt(pts);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[idx] += h;
            let mut minus = base.clone();
            minus.data_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad.data()[idx];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-2));
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
