use crate::imageio::Image;

use super::EvalError;

/// Reported PSNR for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image, mask: &[bool]) -> Result<(), EvalError> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels || mask.len() != a.width * a.height {
        return Err(EvalError::Input("image and mask shapes differ".into()));
    }
    Ok(())
}

/// PSNR over the masked pixels (all channels), dynamic range 1, capped at 99 dB.
pub fn masked_psnr(a: &Image, b: &Image, mask: &[bool]) -> Result<f64, EvalError> {
    check(a, b, mask)?;
    let c = a.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for k in 0..c {
            let d = a.data[i * c + k] - b.data[i * c + k];
            sum += d * d;
        }
        n += c;
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { PSNR_CAP_DB } else { (-10.0 * mse.log10()).min(PSNR_CAP_DB) })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean SSIM over 7×7 Gaussian windows (σ = 1.5) lying entirely inside the
/// mask, averaged over channels.
pub fn masked_ssim(a: &Image, b: &Image, mask: &[bool]) -> Result<f64, EvalError> {
    check(a, b, mask)?;
    let (w, h, c) = (a.width, a.height, a.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::EmptyMask);
    }
    let kernel = gaussian_window();
    let (mut total, mut windows) = (0.0, 0usize);
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let inside = (0..SSIM_WINDOW).all(|dy| (0..SSIM_WINDOW).all(|dx| mask[(y0 + dy) * w + x0 + dx]));
            if !inside {
                continue;
            }
            for k in 0..c {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = kernel[dy * SSIM_WINDOW + dx];
                        let i = ((y0 + dy) * w + x0 + dx) * c + k;
                        let (va, vb) = (a.data[i], b.data[i]);
                        ma += g * va;
                        mb += g * vb;
                        aa += g * va * va;
                        bb += g * vb * vb;
                        ab += g * va * vb;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(total / (windows * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize, shift: f64) -> Image {
        let data = (0..w * h * 3).map(|i| ((i / 3) % w) as f64 / w as f64 * 0.5 + ((i / 3) / w) as f64 / h as f64 * 0.3 + shift).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn identical_images_hit_the_caps() {
        let a = gradient_image(16, 12, 0.1);
        let mask = vec![true; 16 * 12];
        assert_eq!(masked_psnr(&a, &a, &mask).unwrap(), 99.0);
        assert_eq!(masked_ssim(&a, &a, &mask).unwrap(), 1.0);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = gradient_image(16, 12, 0.1);
        let b = gradient_image(16, 12, 0.2);
        let psnr = masked_psnr(&a, &b, &vec![true; 16 * 12]).unwrap();
        assert!((psnr - 20.0).abs() < 1e-9, "{psnr}");
    }

    #[test]
    fn mask_selects_the_matching_half() {
        let (w, h) = (20, 10);
        let a = gradient_image(w, h, 0.0);
        let mut b = gradient_image(w, h, 0.05);
        // Left half of b equals a; right half gets noise.
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    let i = (y * w + x) * 3 + k;
                    b.data[i] = if x < 10 { a.data[i] } else { ((i * 7919) % 100) as f64 / 100.0 };
                }
            }
        }
        let left: Vec<bool> = (0..w * h).map(|i| i % w < 10).collect();
        assert_eq!(masked_psnr(&a, &b, &left).unwrap(), 99.0);
        assert_eq!(masked_ssim(&a, &b, &left).unwrap(), 1.0);
        let right: Vec<bool> = left.iter().map(|m| !m).collect();
        assert!(masked_psnr(&a, &b, &right).unwrap() < 20.0);
        assert!(masked_ssim(&a, &b, &right).unwrap() < 0.9);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = gradient_image(8, 8, 0.0);
        assert!(matches!(masked_psnr(&a, &a, &[false; 64]), Err(EvalError::EmptyMask)));
        let mut sparse = vec![false; 64];
        sparse[9] = true;
        assert!(masked_psnr(&a, &a, &sparse).is_ok());
        assert!(matches!(masked_ssim(&a, &a, &sparse), Err(EvalError::EmptyMask)));
    }
}
