//! Deterministic generators mapping a starting latent to an image.
//!
//! Refinement only sees the [`Generator`] trait. Two implementations exist:
//! a DDIM chain over a linear noise predictor (a cheap, exactly analysable
//! stand-in for a diffusion model) and a pose-perturbation generator that
//! re-renders a synthetic scene from a perturbed camera.

mod pose;
mod schedule;

pub use pose::{transform_points, PoseLatentGenerator, PoseTransformOp};
pub use schedule::{NoiseSchedule, ScheduleError, ScheduleJson};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{DiffError, Tape, Tensor, Var};

/// A differentiable, deterministic map from a latent to an `[H, W, 3]` image.
pub trait Generator {
    fn latent_shape(&self) -> Vec<usize>;
    fn generate<'t>(&self, tape: &'t Tape, latent: Var<'t>) -> Result<Var<'t>, DiffError>;

    /// Named scalars describing a latent, recorded in refinement traces.
    fn diagnostics(&self, _latent: &Tensor) -> Vec<(&'static str, f64)> {
        Vec::new()
    }
}

/// i.i.d. standard normal entries, deterministic in `seed`.
pub fn sample_initial_latent(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("sized latent")
}

/// One deterministic DDIM update from sampled step `t` to the previous
/// sampled step (or to 0 for the first one).
pub fn ddim_step<'t>(z_t: Var<'t>, eps_hat: Var<'t>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'t>, DiffError> {
    let (a, b) = schedule.step_coefficients(t);
    z_t.scale(a)?.add(eps_hat.scale(b)?)
}

/// DDIM chain with the linear noise predictor `eps_hat = a·z_t`.
pub fn ddim_linear_chain<'t>(z_t: Var<'t>, schedule: &NoiseSchedule, a: f64) -> Result<Var<'t>, DiffError> {
    let mut z = z_t;
    for &t in schedule.sample_steps.iter().rev() {
        let eps = z.scale(a)?;
        z = ddim_step(z, eps, t, schedule)?;
    }
    Ok(z)
}

/// DDIM chain with a linear predictor, decoded by an elementwise sigmoid.
#[derive(Debug, Clone)]
pub struct LinearDdimGenerator {
    pub schedule: NoiseSchedule,
    pub a: f64,
    pub height: usize,
    pub width: usize,
}

impl Generator for LinearDdimGenerator {
    fn latent_shape(&self) -> Vec<usize> {
        vec![self.height, self.width, 3]
    }

    fn generate<'t>(&self, _tape: &'t Tape, latent: Var<'t>) -> Result<Var<'t>, DiffError> {
        generate_linear_ddim(latent, &self.schedule, self.a)?.reshape(&[self.height, self.width, 3])
    }
}

/// Runs the linear DDIM chain from `z_T` and applies a sigmoid.
pub fn generate_linear_ddim<'t>(z_t: Var<'t>, schedule: &NoiseSchedule, a: f64) -> Result<Var<'t>, DiffError> {
    ddim_linear_chain(z_t, schedule, a)?.sigmoid()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_denoiser_telescopes() {
        let s = NoiseSchedule::default();
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(&[0.3, -1.2, 2.0]).with_grad());
        let zero = tape.constant(Tensor::zeros(&[3]));
        let mut cur = z;
        for &t in s.sample_steps.iter().rev() {
            cur = ddim_step(cur, zero, t, &s).unwrap();
        }
        let scale = 1.0 / s.alpha_bar(1000).sqrt();
        for (out, inp) in cur.value().data().iter().zip([0.3, -1.2, 2.0]) {
            assert!((out - inp * scale).abs() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn equal_alphas_give_identity_step() {
        let s = NoiseSchedule::from_alpha_bars(vec![1.0, 0.5, 0.5], vec![1, 2]).unwrap();
        let tape = Tape::new();
        let z = tape.constant(Tensor::vector(&[0.7, -0.1]));
        let eps = tape.constant(Tensor::vector(&[5.0, 3.0]));
        let out = ddim_step(z, eps, 2, &s).unwrap();
        for (a, b) in out.value().data().iter().zip([0.7, -0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_predictor_matches_closed_form_product() {
        let s = NoiseSchedule::default();
        let a = 0.1;
        // Independent recursion: each step multiplies by
        // √ᾱ_prev·(1 − √(1−ᾱ_t)·a)/√ᾱ_t + √(1−ᾱ_prev)·a.
        let mut product = 1.0;
        let mut prev_steps = vec![0];
        prev_steps.extend(&s.sample_steps[..s.sample_steps.len() - 1]);
        for (&t, &p) in s.sample_steps.iter().zip(&prev_steps) {
            let (at, ap) = (s.alpha_bar(t), s.alpha_bar(p));
            product *= ap.sqrt() * (1.0 - (1.0 - at).sqrt() * a) / at.sqrt() + (1.0 - ap).sqrt() * a;
        }
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(&[0.4]).with_grad());
        let z0 = ddim_linear_chain(z, &s, a).unwrap();
        assert!((z0.value().item() - 0.4 * product).abs() < 1e-9 * product.abs().max(1.0));
        let g = tape.backward(z0.sum().unwrap()).unwrap().wrt(z);
        assert!((g.item() - product).abs() < 1e-9 * product.abs().max(1.0));

        // Through the sigmoid decoder: d sigmoid(c·z)/dz = c·σ(1−σ).
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(&[0.4]).with_grad());
        let img = generate_linear_ddim(z, &s, a).unwrap();
        let sig = 1.0 / (1.0 + (-0.4 * product).exp());
        let g = tape.backward(img.sum().unwrap()).unwrap().wrt(z);
        assert!((g.item() - product * sig * (1.0 - sig)).abs() < 1e-6);
    }

    #[test]
    fn zero_slope_generator_is_scaled_sigmoid() {
        let s = NoiseSchedule::default();
        let g = LinearDdimGenerator {
            schedule: s.clone(),
            a: 0.0,
            height: 2,
            width: 2,
        };
        let latent = sample_initial_latent(3, &g.latent_shape());
        let tape = Tape::new();
        let img = g.generate(&tape, tape.constant(latent.clone())).unwrap();
        let scale = 1.0 / s.alpha_bar(1000).sqrt();
        for (o, z) in img.value().data().iter().zip(latent.data()) {
            assert!((o - 1.0 / (1.0 + (-z * scale).exp())).abs() < 1e-9);
        }
        let other = g.generate(&tape, tape.constant(sample_initial_latent(4, &g.latent_shape()))).unwrap();
        assert_ne!(img.value().data(), other.value().data());
    }

    #[test]
    fn latent_sampling_statistics() {
        assert_eq!(sample_initial_latent(9, &[4, 4]), sample_initial_latent(9, &[4, 4]));
        let n = 20_000;
        let z = sample_initial_latent(1, &[n]);
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.1);
    }
}
