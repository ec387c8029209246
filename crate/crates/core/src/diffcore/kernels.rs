//! Numeric kernels shared by the forward and backward passes.

use super::DiffError;

#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Row-major with the given row stride.
    Normal(usize),
    /// Stored as the row-major transpose with the given row stride.
    Transposed(usize),
}

impl Layout {
    fn strides(self) -> (isize, isize) {
        match self {
            Layout::Normal(ld) => (ld as isize, 1),
            Layout::Transposed(ld) => (1, ld as isize),
        }
    }
}

/// `c = a · b` with `a` m×k and `b` k×n; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: the strides describe matrices fully contained in `a`, `b` and `c`
    // (checked by the callers through tensor shapes), and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maps every flat index of `lhs` to the flat index of `rhs` it pairs with.
///
/// `rhs` must be a single element or have the same rank with every dimension
/// equal to the matching `lhs` dimension or 1.
pub(crate) fn broadcast_map(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>, DiffError> {
    let n: usize = lhs.iter().product();
    let rhs_n: usize = rhs.iter().product();
    if rhs_n == 1 {
        return Ok(vec![0; n]);
    }
    if lhs == rhs {
        return Ok((0..n).collect());
    }
    let compatible = lhs.len() == rhs.len() && lhs.iter().zip(rhs).all(|(a, b)| a == b || *b == 1);
    if !compatible {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let rank = lhs.len();
    let mut rhs_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        rhs_strides[d] = if rhs[d] == 1 { 0 } else { acc };
        acc *= rhs[d];
    }
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut j = 0usize;
    for _ in 0..n {
        map.push(j);
        for d in (0..rank).rev() {
            counter[d] += 1;
            j += rhs_strides[d];
            if counter[d] < lhs[d] {
                break;
            }
            j -= rhs_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Ok(map)
}

/// Four-tap bilinear stencil with border clamping.
pub(crate) struct BilinearWeights {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    inside_x: bool,
    inside_y: bool,
}

pub(crate) fn bilinear_weights(x: f64, y: f64, w: usize, h: usize) -> BilinearWeights {
    let axis = |v: f64, size: usize| {
        let max = (size - 1) as f64;
        let inside = (0.0..=max).contains(&v);
        let c = v.clamp(0.0, max);
        let lo = if size >= 2 { (c.floor() as usize).min(size - 2) } else { 0 };
        let hi = (lo + 1).min(size - 1);
        let frac = if size >= 2 { c - lo as f64 } else { 0.0 };
        (lo, hi, frac, inside)
    };
    let (x0, x1, fx, inside_x) = axis(x, w);
    let (y0, y1, fy, inside_y) = axis(y, h);
    BilinearWeights {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        inside_x,
        inside_y,
    }
}

impl BilinearWeights {
    /// `(x, y, weight)` for each tap.
    pub(crate) fn taps(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.x0, self.y0, (1.0 - fx) * (1.0 - fy)),
            (self.x1, self.y0, fx * (1.0 - fy)),
            (self.x0, self.y1, (1.0 - fx) * fy),
            (self.x1, self.y1, fx * fy),
        ]
    }

    /// Derivative of the interpolated value with respect to the sample position.
    pub(crate) fn position_derivative(&self, at: impl Fn(usize, usize) -> f64) -> (f64, f64) {
        let (fx, fy) = (self.fx, self.fy);
        let i00 = at(self.x0, self.y0);
        let i10 = at(self.x1, self.y0);
        let i01 = at(self.x0, self.y1);
        let i11 = at(self.x1, self.y1);
        let dx = if self.inside_x && self.x1 != self.x0 {
            (1.0 - fy) * (i10 - i00) + fy * (i11 - i01)
        } else {
            0.0
        };
        let dy = if self.inside_y && self.y1 != self.y0 {
            (1.0 - fx) * (i01 - i00) + fx * (i11 - i10)
        } else {
            0.0
        };
        (dx, dy)
    }
}
