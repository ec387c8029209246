use std::rc::Rc;

use crate::diffcore::{CustomOp, DiffError, Tape, Tensor, Var};

/// Patches whose per-pixel standard deviation is below this carry no usable
/// structure and get the zero descriptor.
pub const FLAT_STD: f64 = 1e-3;

/// Dense per-pixel descriptors `[H·W, p²]` plus the matchability mask.
pub struct FeatureMap<'t> {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub descriptors: Var<'t>,
    pub matchable: Vec<bool>,
}

impl FeatureMap<'_> {
    pub fn dim(&self) -> usize {
        self.patch * self.patch
    }
}

/// Flat offsets (into an `[H, W]` image) of the clamped `p×p` window around every pixel.
fn window_indices(width: usize, height: usize, patch: usize) -> Vec<usize> {
    let r = (patch / 2) as isize;
    let mut idx = Vec::with_capacity(width * height * patch * patch);
    for y in 0..height as isize {
        for x in 0..width as isize {
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, height as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, width as isize - 1) as usize;
                    idx.push(yy * width + xx);
                }
            }
        }
    }
    idx
}

/// Grayscale `[H, W]` from an `[H, W, 3]` image.
pub fn grayscale<'t>(image: Var<'t>) -> Result<Var<'t>, DiffError> {
    let shape = image.shape();
    let [h, w, 3] = shape[..] else {
        return Err(DiffError::Rank {
            op: "grayscale",
            expected: 3,
            got: shape,
        });
    };
    let weights = image.tape().constant(Tensor::new(&[3, 1], vec![0.299, 0.587, 0.114])?);
    image.reshape(&[h * w, 3])?.matmul(weights)?.reshape(&[h, w])
}

/// Descriptor per pixel: the clamped `patch×patch` grayscale window,
/// zero-meaned and scaled to unit L2 norm. Differentiable w.r.t. `image`.
pub fn extract_features<'t>(tape: &'t Tape, image: Var<'t>, patch: usize) -> Result<FeatureMap<'t>, DiffError> {
    assert!(patch % 2 == 1, "descriptor window must have odd size");
    let gray = grayscale(image)?;
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let indices = window_indices(w, h, patch);
    let d = patch * patch;
    let values = gray.value();
    let src = values.data();
    let mut out = vec![0.0; w * h * d];
    let mut inv_norm = vec![0.0; w * h];
    for (pixel, (row, win)) in out.chunks_mut(d).zip(indices.chunks(d)).enumerate() {
        let mean = win.iter().map(|&i| src[i]).sum::<f64>() / d as f64;
        let mut ss = 0.0;
        for (o, &i) in row.iter_mut().zip(win) {
            *o = src[i] - mean;
            ss += *o * *o;
        }
        if ss >= d as f64 * FLAT_STD * FLAT_STD {
            let inv = 1.0 / ss.sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm[pixel] = inv;
        } else {
            row.fill(0.0);
        }
    }
    let matchable = inv_norm.iter().map(|v| *v > 0.0).collect();
    let op = DescriptorOp {
        indices,
        inv_norm,
        patch_len: d,
    };
    let descriptors = tape.custom(Rc::new(op), &[gray], Tensor::new(&[w * h, d], out)?)?;
    Ok(FeatureMap {
        width: w,
        height: h,
        patch,
        descriptors,
        matchable,
    })
}

struct DescriptorOp {
    indices: Vec<usize>,
    inv_norm: Vec<f64>,
    patch_len: usize,
}

impl CustomOp for DescriptorOp {
    fn name(&self) -> &'static str {
        "patch_descriptor"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = self.patch_len;
        let mut g_gray = vec![0.0; inputs[0].numel()];
        let mut g_centered = vec![0.0; d];
        for (pixel, &inv) in self.inv_norm.iter().enumerate() {
            if inv == 0.0 {
                continue;
            }
            let desc = &output.data()[pixel * d..(pixel + 1) * d];
            let g = &grad[pixel * d..(pixel + 1) * d];
            // Through normalization: (g − d·⟨d, g⟩)/‖c‖, then through centring: subtract the mean.
            let proj: f64 = desc.iter().zip(g).map(|(a, b)| a * b).sum();
            let mut mean = 0.0;
            for j in 0..d {
                g_centered[j] = (g[j] - desc[j] * proj) * inv;
                mean += g_centered[j];
            }
            mean /= d as f64;
            for (j, &src) in self.indices[pixel * d..(pixel + 1) * d].iter().enumerate() {
                g_gray[src] += g_centered[j] - mean;
            }
        }
        vec![Some(g_gray)]
    }
}
