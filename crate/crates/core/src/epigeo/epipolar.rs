use nalgebra::{Matrix3, Point2, Vector2, Vector3};

use super::{GeoError, Intrinsics, RelativePose};

/// Cross-product matrix: `skew(a)·b = a × b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `E = [t]ₓR`, so that `yᵀEx = 0` for normalized reference point `x` and
/// normalized target point `y`.
pub fn essential_from_relative(rel: &RelativePose) -> Result<Matrix3<f64>, GeoError> {
    let t = rel.translation();
    if t.norm() <= 1e-12 {
        return Err(GeoError::DegeneratePose);
    }
    Ok(skew(t) * rel.rotation())
}

/// Rank-2 map from reference pixels to epipolar lines in the target image,
/// stored with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Wraps `m` after scaling it to unit Frobenius norm.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeoError> {
        let n = m.norm();
        if n <= 0.0 || !n.is_finite() {
            return Err(GeoError::DegeneratePose);
        }
        Ok(Self(m / n))
    }

    pub fn from_relative(rel: &RelativePose, k_ref: &Intrinsics, k_gen: &Intrinsics) -> Result<Self, GeoError> {
        fundamental_from_essential(&essential_from_relative(rel)?, k_ref, k_gen)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Algebraic residual `ỹᵀFx̃`.
    pub fn residual(&self, x: &Point2<f64>, y: &Point2<f64>) -> f64 {
        y.to_homogeneous().dot(&(self.0 * x.to_homogeneous()))
    }

    /// Epipole in the reference image (`F·e = 0`), `None` at infinity.
    pub fn reference_epipole(&self) -> Option<Point2<f64>> {
        null_point(&self.0)
    }

    /// Epipole in the target image (`Fᵀ·e = 0`), `None` at infinity.
    pub fn target_epipole(&self) -> Option<Point2<f64>> {
        null_point(&self.0.transpose())
    }
}

fn null_point(m: &Matrix3<f64>) -> Option<Point2<f64>> {
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let (idx, _) = svd.singular_values.argmin();
    let e = v_t.row(idx).transpose();
    (e.z.abs() > 1e-12 * e.norm()).then(|| Point2::new(e.x / e.z, e.y / e.z))
}

/// `F = K_gen⁻ᵀ·E·K_ref⁻¹`, normalized.
pub fn fundamental_from_essential(e: &Matrix3<f64>, k_ref: &Intrinsics, k_gen: &Intrinsics) -> Result<FundamentalMatrix, GeoError> {
    FundamentalMatrix::from_matrix(k_gen.inverse_matrix().transpose() * e * k_ref.inverse_matrix())
}

/// Homogeneous image line `a·x + b·y + c = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Line {
    pub fn normal_norm(&self) -> f64 {
        self.a.hypot(self.b)
    }
}

/// Line `F·(px, py, 1)` in the other image.
///
/// Fails with [`GeoError::EpipoleDegenerate`] when `p` is the epipole and the
/// line is undefined.
pub fn epipolar_line(f: &FundamentalMatrix, p: &Point2<f64>) -> Result<Line, GeoError> {
    let l = f.matrix() * p.to_homogeneous();
    let line = Line { a: l.x, b: l.y, c: l.z };
    // F has unit norm, so a vanishing normal is measured against the point's scale.
    if line.normal_norm() <= 1e-12 * p.to_homogeneous().norm() {
        return Err(GeoError::EpipoleDegenerate);
    }
    Ok(line)
}

pub fn point_line_distance(p: &Point2<f64>, l: &Line) -> Result<f64, GeoError> {
    let n = l.normal_norm();
    if n == 0.0 {
        return Err(GeoError::EpipoleDegenerate);
    }
    Ok((l.a * p.x + l.b * p.y + l.c).abs() / n)
}

/// Which distance terms an epipolar measurement reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// `d(y, Fx) + d(x, Fᵀy)`.
    #[default]
    Symmetric,
    /// `d(y, Fx)` only.
    OneSided,
}

/// `d(y, F·x) + d(x, Fᵀ·y)` in pixels.
pub fn symmetric_epipolar_distance(f: &FundamentalMatrix, x: &Point2<f64>, y: &Point2<f64>) -> Result<f64, GeoError> {
    epipolar_distance(f, x, y, DistanceMode::Symmetric)
}

pub fn epipolar_distance(f: &FundamentalMatrix, x: &Point2<f64>, y: &Point2<f64>, mode: DistanceMode) -> Result<f64, GeoError> {
    let forward = point_line_distance(y, &epipolar_line(f, x)?)?;
    match mode {
        DistanceMode::OneSided => Ok(forward),
        DistanceMode::Symmetric => Ok(forward + point_line_distance(x, &epipolar_line(&f.transpose(), y)?)?),
    }
}

/// Whether `p` lies within `radius` pixels of `epipole`.
pub fn near_epipole(p: &Point2<f64>, epipole: Option<&Point2<f64>>, radius: f64) -> bool {
    epipole.is_some_and(|e| (p - e).norm() < radius)
}

/// Unit normal direction of `l`.
pub fn line_normal(l: &Line) -> Vector2<f64> {
    Vector2::new(l.a, l.b) / l.normal_norm()
}
