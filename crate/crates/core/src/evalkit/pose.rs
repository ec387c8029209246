use nalgebra::{DMatrix, DVector, Matrix3, Point2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::epigeo::{skew, FundamentalMatrix, Intrinsics};

use super::EvalError;

/// Minimum correspondences for the eight-point solver.
pub const MIN_CORRESPONDENCES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub sampson_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            sampson_threshold_px: 1.5,
            seed: 0,
        }
    }
}

/// Relative pose `x_gen = R·x_ref + t` up to the scale of `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub rotation: Matrix3<f64>,
    /// Unit translation direction.
    pub translation: Vector3<f64>,
    pub fundamental: FundamentalMatrix,
    pub inliers: usize,
    pub inlier_mask: Vec<bool>,
    /// Set when a homography explains the inliers as well as `F` does
    /// (planar scene, pure rotation or zero baseline).
    pub degenerate: bool,
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn hartley(points: &[Point2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.x / n, a.1 + p.y / n));
    let mean_dist = points.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let q = t * p.to_homogeneous();
    Point2::new(q.x / q.z, q.y / q.z)
}

/// Right singular vector of the smallest singular value of a `rows × 9` system.
fn null_vector(rows: &[[f64; 9]]) -> Option<[f64; 9]> {
    let n = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..9 {
            a[(i, j)] = r[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (idx, _) = svd.singular_values.argmin();
    let mut out = [0.0; 9];
    for j in 0..9 {
        out[j] = v_t[(idx, j)];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Normalized eight-point estimate of `F` (with `yᵀFx = 0`), rank 2.
pub fn eight_point(x: &[Point2<f64>], y: &[Point2<f64>]) -> Option<FundamentalMatrix> {
    if x.len() < MIN_CORRESPONDENCES || x.len() != y.len() {
        return None;
    }
    let (tx, ty) = (hartley(x), hartley(y));
    let rows: Vec<[f64; 9]> = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let (a, b) = (apply(&tx, a), apply(&ty, b));
            [b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0]
        })
        .collect();
    let f = null_vector(&rows)?;
    let f = Matrix3::from_row_slice(&f);
    let svd = f.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    let (idx, _) = s.argmin();
    s[idx] = 0.0;
    let f = u * Matrix3::from_diagonal(&s) * v_t;
    FundamentalMatrix::from_matrix(ty.transpose() * f * tx).ok()
}

/// First-order geometric error of `(x, y)` under `F`, in pixels.
pub fn sampson_distance(f: &FundamentalMatrix, x: &Point2<f64>, y: &Point2<f64>) -> f64 {
    let m = f.matrix();
    let (xh, yh) = (x.to_homogeneous(), y.to_homogeneous());
    let fx = m * xh;
    let fty = m.transpose() * yh;
    let r = yh.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + fty.x * fty.x + fty.y * fty.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    r.abs() / den.sqrt()
}

/// DLT homography `y ~ H·x`.
fn homography(x: &[Point2<f64>], y: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    if x.len() < 4 {
        return None;
    }
    let (tx, ty) = (hartley(x), hartley(y));
    let mut rows = Vec::with_capacity(2 * x.len());
    for (a, b) in x.iter().zip(y) {
        let (a, b) = (apply(&tx, a), apply(&ty, b));
        rows.push([-a.x, -a.y, -1.0, 0.0, 0.0, 0.0, b.x * a.x, b.x * a.y, b.x]);
        rows.push([0.0, 0.0, 0.0, -a.x, -a.y, -1.0, b.y * a.x, b.y * a.y, b.y]);
    }
    let h = Matrix3::from_row_slice(&null_vector(&rows)?);
    ty.try_inverse().map(|ti| ti * h * tx)
}

fn transfer_error(h: &Matrix3<f64>, x: &Point2<f64>, y: &Point2<f64>) -> f64 {
    let q = h * x.to_homogeneous();
    if q.z.abs() < 1e-12 {
        return f64::INFINITY;
    }
    (Point2::new(q.x / q.z, q.y / q.z) - y).norm()
}

/// Linear triangulation in the reference camera frame from normalized points.
fn triangulate(r: &Matrix3<f64>, t: &Vector3<f64>, a: &Point2<f64>, b: &Point2<f64>) -> Option<Vector3<f64>> {
    let p1 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
    let p2 = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
    ];
    let mut m = nalgebra::Matrix4::zeros();
    for j in 0..4 {
        m[(0, j)] = a.x * p1[2][j] - p1[0][j];
        m[(1, j)] = a.y * p1[2][j] - p1[1][j];
        m[(2, j)] = b.x * p2[2][j] - p2[0][j];
        m[(3, j)] = b.y * p2[2][j] - p2[1][j];
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let (idx, _) = svd.singular_values.argmin();
    let h = v_t.row(idx);
    (h[3].abs() > 1e-12).then(|| Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// The decomposition of `E` with the most points in front of both cameras.
pub fn decompose_essential(e: &Matrix3<f64>, x: &[Point2<f64>], y: &[Point2<f64>]) -> Option<(Matrix3<f64>, Vector3<f64>, usize)> {
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let candidates = [(u * w * v_t, t), (u * w * v_t, -t), (u * w.transpose() * v_t, t), (u * w.transpose() * v_t, -t)];
    candidates
        .into_iter()
        .map(|(r, t)| {
            let front = x
                .iter()
                .zip(y)
                .filter(|(a, b)| triangulate(&r, &t, a, b).is_some_and(|p| p.z > 0.0 && (r * p + t).z > 0.0))
                .count();
            (r, t, front)
        })
        .max_by_key(|c| c.2)
}

/// Robust relative pose from pixel correspondences `x` (reference) and `y`
/// (generated): RANSAC over eight-point samples scored by Sampson error,
/// least-squares re-fit on the inliers, essential decomposition with the
/// cheirality test, then Sampson-error polishing of the pose.
pub fn estimate_relative_pose(x: &[Point2<f64>], y: &[Point2<f64>], k_ref: &Intrinsics, k_gen: &Intrinsics, ransac: &RansacConfig) -> Result<PoseEstimate, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Input(format!("{} reference points but {} matches", x.len(), y.len())));
    }
    if x.len() < MIN_CORRESPONDENCES {
        return Err(EvalError::TooFewMatches(x.len()));
    }
    let thr = ransac.sampson_threshold_px;
    let mask_for = |f: &FundamentalMatrix| -> Vec<bool> { x.iter().zip(y).map(|(a, b)| sampson_distance(f, a, b) < thr).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(ransac.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..ransac.iterations {
        let idx = sample(&mut rng, x.len(), MIN_CORRESPONDENCES);
        let sx: Vec<Point2<f64>> = idx.iter().map(|i| x[i]).collect();
        let sy: Vec<Point2<f64>> = idx.iter().map(|i| y[i]).collect();
        let Some(f) = eight_point(&sx, &sy) else { continue };
        let mask = mask_for(&f);
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, mask));
        }
    }
    let (_, mut mask) = best.ok_or(EvalError::Degenerate)?;
    let select = |mask: &[bool]| -> (Vec<Point2<f64>>, Vec<Point2<f64>>) {
        x.iter().zip(y).zip(mask).filter(|(_, m)| **m).map(|((a, b), _)| (*a, *b)).unzip()
    };
    let (mut ix, mut iy) = select(&mask);
    if ix.len() < MIN_CORRESPONDENCES {
        return Err(EvalError::TooFewMatches(ix.len()));
    }
    let mut f = eight_point(&ix, &iy).ok_or(EvalError::Degenerate)?;
    let refit_mask = mask_for(&f);
    if refit_mask.iter().filter(|m| **m).count() >= MIN_CORRESPONDENCES {
        mask = refit_mask;
        (ix, iy) = select(&mask);
        f = eight_point(&ix, &iy).ok_or(EvalError::Degenerate)?;
    }

    let e = k_gen.matrix().transpose() * f.matrix() * k_ref.matrix();
    let nx: Vec<Point2<f64>> = ix.iter().map(|p| k_ref.normalize(p)).collect();
    let ny: Vec<Point2<f64>> = iy.iter().map(|p| k_gen.normalize(p)).collect();
    let (rotation, translation, _) = decompose_essential(&e, &nx, &ny).ok_or(EvalError::Degenerate)?;
    let (rotation, translation) = refine_pose(rotation, translation.normalize(), &ix, &iy, k_ref, k_gen, thr / 3.0);
    let f = fundamental_of(&rotation, &translation, k_ref, k_gen).ok_or(EvalError::Degenerate)?;
    let refined_mask = mask_for(&f);
    if refined_mask.iter().filter(|m| **m).count() >= ix.len() {
        mask = refined_mask;
    }

    let degenerate = match homography(&ix, &iy) {
        Some(h) => {
            let explained = ix.iter().zip(&iy).filter(|(a, b)| transfer_error(&h, a, b) < 2.0 * thr).count();
            explained as f64 >= 0.9 * ix.len() as f64
        }
        None => true,
    };
    Ok(PoseEstimate {
        rotation,
        translation: translation.normalize(),
        fundamental: f,
        inliers: mask.iter().filter(|m| **m).count(),
        inlier_mask: mask,
        degenerate,
    })
}

fn fundamental_of(r: &Matrix3<f64>, t: &Vector3<f64>, k_ref: &Intrinsics, k_gen: &Intrinsics) -> Option<FundamentalMatrix> {
    FundamentalMatrix::from_matrix(k_gen.inverse_matrix().transpose() * skew(t) * r * k_ref.inverse_matrix()).ok()
}

/// Signed Sampson residuals of every pair under the pose `(r, t)`.
pub(crate) fn sampson_residuals(r: &Matrix3<f64>, t: &Vector3<f64>, x: &[Point2<f64>], y: &[Point2<f64>], k_ref: &Intrinsics, k_gen: &Intrinsics) -> Option<DVector<f64>> {
    let f = fundamental_of(r, t, k_ref, k_gen)?;
    let m = f.matrix();
    Some(DVector::from_iterator(
        x.len(),
        x.iter().zip(y).map(|(a, b)| {
            let (ah, bh) = (a.to_homogeneous(), b.to_homogeneous());
            let fx = m * ah;
            let fty = m.transpose() * bh;
            let den = (fx.x * fx.x + fx.y * fx.y + fty.x * fty.x + fty.y * fty.y).sqrt();
            bh.dot(&fx) / den
        }),
    ))
}

/// Levenberg-Marquardt on a Cauchy-robustified Sampson error over rotation
/// (3) and translation direction (2 tangent coordinates). `scale` is the
/// Cauchy knee in pixels; gross outliers that slipped into the inlier set
/// lose influence instead of bending the pose.
fn refine_pose(
    r0: Matrix3<f64>,
    t0: Vector3<f64>,
    x: &[Point2<f64>],
    y: &[Point2<f64>],
    k_ref: &Intrinsics,
    k_gen: &Intrinsics,
    scale: f64,
) -> (Matrix3<f64>, Vector3<f64>) {
    let apply = |r: &Matrix3<f64>, t: &Vector3<f64>, d: &[f64]| -> (Matrix3<f64>, Vector3<f64>) {
        let (b1, b2) = tangent_basis(t);
        let r = nalgebra::Rotation3::new(Vector3::new(d[0], d[1], d[2])).into_inner() * r;
        (r, (t + b1 * d[3] + b2 * d[4]).normalize())
    };
    let c2 = scale * scale;
    let cost = |r: &Matrix3<f64>, t: &Vector3<f64>| {
        sampson_residuals(r, t, x, y, k_ref, k_gen).map_or(f64::INFINITY, |e| e.iter().map(|v| c2 * (v * v / c2).ln_1p()).sum())
    };
    let (mut r, mut t) = (r0, t0);
    let mut current = cost(&r, &t);
    let mut lambda = 1e-3;
    for _ in 0..30 {
        let Some(e0) = sampson_residuals(&r, &t, x, y, k_ref, k_gen) else { break };
        let mut jac = DMatrix::<f64>::zeros(x.len(), 5);
        let h = 1e-7;
        for j in 0..5 {
            let mut d = [0.0; 5];
            d[j] = h;
            let (rp, tp) = apply(&r, &t, &d);
            d[j] = -h;
            let (rm, tm) = apply(&r, &t, &d);
            let (Some(ep), Some(em)) = (sampson_residuals(&rp, &tp, x, y, k_ref, k_gen), sampson_residuals(&rm, &tm, x, y, k_ref, k_gen)) else {
                return (r, t);
            };
            jac.set_column(j, &((ep - em) / (2.0 * h)));
        }
        // Iteratively reweighted Gauss-Newton: w = 1 / (1 + r²/c²).
        let w = e0.map(|v| (1.0 / (1.0 + v * v / c2)).sqrt());
        for (mut row, wi) in jac.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let jtj = jac.transpose() * &jac;
        let jte = jac.transpose() * e0.component_mul(&w);
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for i in 0..5 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&jte)) else { break };
            let (rn, tn) = apply(&r, &t, step.as_slice());
            let c = cost(&rn, &tn);
            if c < current {
                (r, t, current) = (rn, tn, c);
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&helper).normalize();
    (b1, t.cross(&b1).normalize())
}
