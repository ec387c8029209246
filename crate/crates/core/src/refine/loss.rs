use std::rc::Rc;

use nalgebra::Point2;

use crate::diffcore::{huber_value, Tape, Tensor, Var};
use crate::epigeo::{near_epipole, FundamentalMatrix};
use crate::imageio::Image;
use crate::matcher::{MatchError, MatchSet};

use super::RefineError;

/// Huber penalty: quadratic below `delta`, linear above, C¹ at the knee.
pub fn huber(r: f64, delta: f64) -> f64 {
    huber_value(r, delta)
}

/// The consistency loss and its two terms, all still on the tape.
pub struct ConsistencyLoss<'t> {
    pub total: Var<'t>,
    /// Mean Huber penalty of the summed symmetric epipolar distance.
    pub epipolar: Var<'t>,
    /// Mean L1 colour difference over the three channels.
    pub rgb: Var<'t>,
    /// Matches used, after epipole exclusion.
    pub count: usize,
}

/// Loss weights and robustness settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub huber_delta: f64,
    pub epipole_exclusion: f64,
}

/// Mean over matches of `ρ(d(y, Fx) + d(x, Fᵀy)) + λ·‖I_ref(x) − I_gen(y)‖₁`.
///
/// `x` are fixed reference pixels, `y` the `[N, 2]` matched positions in
/// `generated`. Matches within `epipole_exclusion` px of either epipole
/// are dropped before averaging.
pub fn consistency_loss<'t>(
    x: &[[f64; 2]],
    y: Var<'t>,
    f: &FundamentalMatrix,
    reference: &Image,
    generated: Var<'t>,
    weights: &LossWeights,
) -> Result<ConsistencyLoss<'t>, RefineError> {
    let tape = y.tape();
    let yv = y.value();
    let (e_ref, e_gen) = (f.reference_epipole(), f.target_epipole());
    let keep: Vec<usize> = (0..x.len())
        .filter(|&i| {
            let xi = Point2::new(x[i][0], x[i][1]);
            let yi = Point2::new(yv.data()[2 * i], yv.data()[2 * i + 1]);
            !near_epipole(&xi, e_ref.as_ref(), weights.epipole_exclusion) && !near_epipole(&yi, e_gen.as_ref(), weights.epipole_exclusion)
        })
        .collect();
    let n = keep.len();
    if n == 0 {
        return Err(MatchError::InsufficientMatches { found: 0 }.into());
    }
    let y = y.gather(Rc::new(keep.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect()), &[n, 2])?;

    // Line of each fixed x in the generated image, l = F·x̃.
    let fm = f.matrix();
    let mut l12 = Vec::with_capacity(2 * n);
    let mut l3 = Vec::with_capacity(n);
    let mut inv_l = Vec::with_capacity(n);
    for &i in &keep {
        let l = fm * Point2::new(x[i][0], x[i][1]).to_homogeneous();
        l12.extend([l.x, l.y]);
        l3.push(l.z);
        inv_l.push(1.0 / l.x.hypot(l.y));
    }
    let residual = y
        .mul(tape.constant(Tensor::new(&[n, 2], l12)?))?
        .sum_axis(1)?
        .add(tape.constant(Tensor::new(&[n, 1], l3)?))?
        .abs()?;
    // Line of each y in the reference image: first two rows of Fᵀ·ỹ.
    let a = tape.constant(Tensor::new(&[2, 2], vec![fm[(0, 0)], fm[(0, 1)], fm[(1, 0)], fm[(1, 1)]])?);
    let b = tape.constant(Tensor::new(&[1, 2], vec![fm[(2, 0)], fm[(2, 1)]])?);
    let back_norm = y.matmul(a)?.add(b)?.square()?.sum_axis(1)?.sqrt()?;
    let distance = residual
        .mul(tape.constant(Tensor::new(&[n, 1], inv_l)?))?
        .add(residual.div(back_norm)?)?;
    let epipolar = distance.huber(weights.huber_delta)?.mean()?;

    let xs: Vec<f64> = keep.iter().flat_map(|&i| x[i]).collect();
    let ref_colors = tape.constant(reference.to_tensor()).bilinear_sample(tape.constant(Tensor::new(&[n, 2], xs)?))?;
    let gen_colors = generated.bilinear_sample(y)?;
    let rgb = gen_colors.sub(ref_colors)?.l1_norm()?.scale(1.0 / n as f64)?;
    let total = epipolar.add(rgb.scale(weights.lambda_rgb)?)?;
    Ok(ConsistencyLoss {
        total,
        epipolar,
        rgb,
        count: n,
    })
}

/// Loss value of a finished match set against a fixed generated image.
pub fn evaluate_consistency(set: &MatchSet, f: &FundamentalMatrix, reference: &Image, generated: &Image, weights: &LossWeights) -> Result<f64, RefineError> {
    let tape = Tape::new();
    let y: Vec<f64> = set.matches.iter().flat_map(|m| m.y).collect();
    let y = tape.constant(Tensor::new(&[set.len(), 2], y)?);
    let x: Vec<[f64; 2]> = set.matches.iter().map(|m| m.x).collect();
    let loss = consistency_loss(&x, y, f, reference, tape.constant(generated.to_tensor()), weights)?;
    Ok(loss.total.value().item())
}
