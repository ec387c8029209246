//! SE(3) exponential map, generic over the scalar so that forward-mode dual
//! numbers can produce its Jacobian.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// First-order dual number `re + eps·ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Dual::new(self.re / o.re, (self.eps * o.re - self.re * o.eps) / (o.re * o.re))
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.eps * self.re.cos())
    }
    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -self.eps * self.re.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }
}

// Below this squared angle the trigonometric coefficients use their Taylor
// expansions; the truncation error is O(θ⁴) ≈ 1e-20.
const SMALL_ANGLE_SQ: f64 = 1e-10;

/// Exponential of `xi = (ρ, ω)`: translation part first, rotation part second.
///
/// Returns the row-major rotation and the translation.
pub fn se3_exp_generic<T: Scalar>(xi: [T; 6]) -> ([[T; 3]; 3], [T; 3]) {
    let zero = T::from_f64(0.0);
    let one = T::from_f64(1.0);
    let rho = [xi[0], xi[1], xi[2]];
    let w = [xi[3], xi[4], xi[5]];
    let theta_sq = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, c) = if theta_sq.value() < SMALL_ANGLE_SQ {
        let f = T::from_f64;
        (
            one - theta_sq / f(6.0),
            f(0.5) - theta_sq / f(24.0),
            f(1.0 / 6.0) - theta_sq / f(120.0),
        )
    } else {
        let theta = theta_sq.sqrt();
        let (s, co) = (theta.sin(), theta.cos());
        (s / theta, (one - co) / theta_sq, (theta - s) / (theta_sq * theta))
    };
    let k = [[zero, -w[2], w[1]], [w[2], zero, -w[0]], [-w[1], w[0], zero]];
    let mut k2 = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k2[i][j] = k[i][0] * k[0][j] + k[i][1] * k[1][j] + k[i][2] * k[2][j];
        }
    }
    let mut r = [[zero; 3]; 3];
    let mut v = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { one } else { zero };
            r[i][j] = eye + a * k[i][j] + b * k2[i][j];
            v[i][j] = eye + b * k[i][j] + c * k2[i][j];
        }
    }
    let t = [
        v[0][0] * rho[0] + v[0][1] * rho[1] + v[0][2] * rho[2],
        v[1][0] * rho[0] + v[1][1] * rho[1] + v[1][2] * rho[2],
        v[2][0] * rho[0] + v[2][1] * rho[1] + v[2][2] * rho[2],
    ];
    (r, t)
}

/// Jacobian of `(R row-major, t)` (12 outputs) with respect to `xi` (6 inputs).
pub fn se3_exp_jacobian(xi: [f64; 6]) -> [[f64; 6]; 12] {
    let mut jac = [[0.0; 6]; 12];
    for (col, _) in xi.iter().enumerate() {
        let mut dual = [Dual::from_f64(0.0); 6];
        for (i, d) in dual.iter_mut().enumerate() {
            *d = Dual::new(xi[i], if i == col { 1.0 } else { 0.0 });
        }
        let (r, t) = se3_exp_generic(dual);
        for i in 0..3 {
            for j in 0..3 {
                jac[3 * i + j][col] = r[i][j].eps;
            }
            jac[9 + i][col] = t[i].eps;
        }
    }
    jac
}
