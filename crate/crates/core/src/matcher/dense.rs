use std::rc::Rc;

use crate::diffcore::{gemm, CustomOp, DiffError, Layout, Tensor, Var};

use super::FeatureMap;

/// Half-width of the soft-argmax window around the correlation peak.
pub const WINDOW_RADIUS: usize = 2;

/// Reference query pixels `(x, y)` on a stride grid offset by half a stride.
pub fn query_grid(width: usize, height: usize, stride: usize) -> Vec<(usize, usize)> {
    let start = stride / 2;
    let mut q = Vec::new();
    for y in (start..height).step_by(stride.max(1)) {
        for x in (start..width).step_by(stride.max(1)) {
            q.push((x, y));
        }
    }
    q
}

/// Soft-argmax correspondences for a set of reference queries.
pub struct SoftMatches<'t> {
    /// Query pixels in the reference image.
    pub queries: Vec<(usize, usize)>,
    /// Matched positions `[M, 2]` as `(x, y)` in the generated image.
    pub positions: Var<'t>,
    /// Dual-softmax window mass per query, in `[0, 1]`.
    pub confidence: Vec<f64>,
}

/// Pixel indices of the clipped `(2r+1)²` window centred on pixel `center`.
fn window(center: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (cx, cy) = (center % width, center / width);
    let xs = cx.saturating_sub(WINDOW_RADIUS)..=(cx + WINDOW_RADIUS).min(width - 1);
    let ys = cy.saturating_sub(WINDOW_RADIUS)..=(cy + WINDOW_RADIUS).min(height - 1);
    ys.flat_map(move |y| xs.clone().map(move |x| y * width + x))
}

/// First index of the row maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax mass of `row / τ` that falls inside the window around `center`.
fn window_mass(row: &[f64], center: usize, width: usize, height: usize, temperature: f64) -> f64 {
    let max = row[argmax(row)];
    let total: f64 = row.iter().map(|v| ((v - max) / temperature).exp()).sum();
    let inside: f64 = window(center, width, height).map(|u| ((row[u] - max) / temperature).exp()).sum();
    inside / total
}

/// Matches every matchable query of `reference` against `generated`.
///
/// The hard correlation peak selects a window; the position is the
/// softmax-weighted mean pixel inside it. Confidence multiplies the
/// forward window mass by the backward window mass around the query,
/// which suppresses peaks that are not mutual.
pub fn soft_match<'t>(
    reference: &FeatureMap<'t>,
    generated: &FeatureMap<'t>,
    queries: &[(usize, usize)],
    temperature: f64,
) -> Result<SoftMatches<'t>, DiffError> {
    let d = reference.dim();
    if generated.dim() != d {
        return Err(DiffError::ShapeMismatch {
            op: "soft_match",
            lhs: reference.descriptors.shape(),
            rhs: generated.descriptors.shape(),
        });
    }
    let kept: Vec<(usize, usize)> = queries
        .iter()
        .copied()
        .filter(|&(x, y)| reference.matchable[y * reference.width + x])
        .collect();
    let rows: Vec<usize> = kept.iter().map(|&(x, y)| y * reference.width + x).collect();
    let row_index: Vec<usize> = rows.iter().flat_map(|r| r * d..(r + 1) * d).collect();
    let query_desc = reference.descriptors.gather(Rc::new(row_index), &[kept.len(), d])?;

    let (gw, gh) = (generated.width, generated.height);
    let n = gw * gh;
    let m = kept.len();
    let gen = generated.descriptors.value();
    let mut scores = vec![0.0; m * n];
    gemm(m, d, n, query_desc.value().data(), Layout::Normal(d), gen.data(), Layout::Transposed(d), &mut scores);
    let peaks: Vec<usize> = scores.chunks(n).map(argmax).collect();

    let op = SoftArgmaxOp {
        width: gw,
        height: gh,
        temperature,
        peaks,
    };
    let positions = op.forward(query_desc.value().data(), gen.data(), d);

    // Reverse direction: each peak descriptor against the whole reference.
    let (rw, rh) = (reference.width, reference.height);
    let peak_index: Vec<usize> = op.peaks.iter().flat_map(|u| u * d..(u + 1) * d).collect();
    let peak_desc: Vec<f64> = peak_index.iter().map(|&i| gen.data()[i]).collect();
    let mut back = vec![0.0; m * rw * rh];
    let ref_desc = reference.descriptors.value();
    gemm(m, d, rw * rh, &peak_desc, Layout::Normal(d), ref_desc.data(), Layout::Transposed(d), &mut back);
    let confidence = (0..m)
        .map(|q| {
            let fwd = window_mass(&scores[q * n..(q + 1) * n], op.peaks[q], gw, gh, temperature);
            let bwd = window_mass(&back[q * rw * rh..(q + 1) * rw * rh], rows[q], rw, rh, temperature);
            fwd * bwd
        })
        .collect();

    let positions = query_desc
        .tape()
        .custom(Rc::new(op), &[query_desc, generated.descriptors], Tensor::new(&[m, 2], positions)?)?;
    Ok(SoftMatches {
        queries: kept,
        positions,
        confidence,
    })
}

/// Softmax-weighted pixel position inside a fixed window per query.
/// The window centres are chosen outside the graph; only the
/// correlations inside each window carry gradient.
pub struct SoftArgmaxOp {
    width: usize,
    height: usize,
    temperature: f64,
    peaks: Vec<usize>,
}

impl SoftArgmaxOp {
    /// Window pixels and their softmax weights for query `q`.
    fn weights(&self, q: &[f64], gen: &[f64], d: usize, peak: usize) -> Vec<(usize, f64)> {
        let mut w: Vec<(usize, f64)> = window(peak, self.width, self.height)
            .map(|u| (u, q.iter().zip(&gen[u * d..(u + 1) * d]).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        let max = w.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for p in w.iter_mut() {
            p.1 = ((p.1 - max) / self.temperature).exp();
            total += p.1;
        }
        w.iter_mut().for_each(|p| p.1 /= total);
        w
    }

    fn forward(&self, query: &[f64], gen: &[f64], d: usize) -> Vec<f64> {
        let mut pos = Vec::with_capacity(2 * self.peaks.len());
        for (q, &peak) in query.chunks(d).zip(&self.peaks) {
            let (mut x, mut y) = (0.0, 0.0);
            for (u, p) in self.weights(q, gen, d, peak) {
                x += p * (u % self.width) as f64;
                y += p * (u / self.width) as f64;
            }
            pos.extend([x, y]);
        }
        pos
    }
}

impl CustomOp for SoftArgmaxOp {
    fn name(&self) -> &'static str {
        "window_soft_argmax"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (query, gen) = (inputs[0].data(), inputs[1].data());
        let d = inputs[0].shape()[1];
        let mut g_query = vec![0.0; query.len()];
        let mut g_gen = vec![0.0; gen.len()];
        for (i, (q, &peak)) in query.chunks(d).zip(&self.peaks).enumerate() {
            let (yx, yy) = (output.data()[2 * i], output.data()[2 * i + 1]);
            let (gx, gy) = (grad[2 * i], grad[2 * i + 1]);
            for (u, p) in self.weights(q, gen, d, peak) {
                // dL/dc_u = p_u·⟨g, u − y⟩ / τ
                let dc = p * (gx * ((u % self.width) as f64 - yx) + gy * ((u / self.width) as f64 - yy)) / self.temperature;
                let gu = &gen[u * d..(u + 1) * d];
                for k in 0..d {
                    g_query[i * d + k] += dc * gu[k];
                    g_gen[u * d + k] += dc * q[k];
                }
            }
        }
        vec![Some(g_query), Some(g_gen)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    #[test]
    fn grid_is_offset_by_half_stride() {
        let q = query_grid(32, 16, 8);
        assert_eq!(q.len(), 8);
        assert_eq!(q[0], (4, 4));
        assert_eq!(q[7], (28, 12));
    }

    #[test]
    fn window_is_clipped_at_borders() {
        assert_eq!(window(0, 10, 10).count(), 9);
        assert_eq!(window(55, 10, 10).count(), 25);
        assert_eq!(window(99, 10, 10).last(), Some(99));
    }

    #[test]
    fn one_hot_scores_pick_the_peak() {
        // Orthonormal descriptors: query 0 correlates 1 with pixel 5 and 0 elsewhere.
        let (w, h, d) = (4, 3, 12);
        let mut gen = vec![0.0; w * h * d];
        for u in 0..w * h {
            gen[u * d + u] = 1.0;
        }
        let mut query = vec![0.0; d];
        query[5] = 1.0;
        let op = SoftArgmaxOp {
            width: w,
            height: h,
            temperature: 1e-3,
            peaks: vec![5],
        };
        assert_eq!(op.forward(&query, &gen, d), vec![1.0, 1.0]);
    }

    /// One query's window soft-argmax assembled from primitive tape operations.
    fn composed<'t>(query: Var<'t>, gen: Var<'t>, peak: usize, w: usize, h: usize, d: usize, tau: f64) -> Var<'t> {
        let tape = query.tape();
        let pixels: Vec<usize> = window(peak, w, h).collect();
        let coords: Vec<f64> = pixels.iter().flat_map(|u| [(u % w) as f64, (u / w) as f64]).collect();
        let coords = tape.constant(Tensor::new(&[pixels.len(), 2], coords).unwrap());
        let rows = Rc::new(pixels.iter().flat_map(|u| u * d..(u + 1) * d).collect::<Vec<_>>());
        let local = gen.gather(rows, &[pixels.len(), d]).unwrap();
        let scores = query.matmul(local.transpose().unwrap()).unwrap().scale(1.0 / tau).unwrap();
        scores.softmax(1).unwrap().matmul(coords).unwrap()
    }

    #[test]
    fn fused_op_agrees_with_composed_primitives() {
        let (w, h, d, m) = (6, 5, 6, 3);
        let peaks = vec![0, 14, 29];
        let data = |n: usize, seed: usize| -> Vec<f64> { (0..n).map(|i| (((i + seed) * 2654435761) % 1000) as f64 / 1000.0 - 0.5).collect() };
        let (qd, gd) = (data(m * d, 1), data(w * h * d, 7));
        let weights = [0.3, -1.2, 0.8, 0.5, -0.7, 0.1];
        let run = |fused: bool| {
            let tape = Tape::new();
            let q = tape.leaf(Tensor::new(&[m, d], qd.clone()).unwrap().with_grad());
            let g = tape.leaf(Tensor::new(&[w * h, d], gd.clone()).unwrap().with_grad());
            let (y, loss) = if fused {
                let op = SoftArgmaxOp {
                    width: w,
                    height: h,
                    temperature: 0.2,
                    peaks: peaks.clone(),
                };
                let pos = op.forward(&qd, &gd, d);
                let y = tape.custom(Rc::new(op), &[q, g], Tensor::new(&[m, 2], pos).unwrap()).unwrap();
                let loss = y.mul(tape.constant(Tensor::new(&[m, 2], weights.to_vec()).unwrap())).unwrap().sum().unwrap();
                (y.value().data().to_vec(), loss)
            } else {
                let mut ys = Vec::new();
                let mut loss = tape.constant(Tensor::scalar(0.0));
                for (i, &peak) in peaks.iter().enumerate() {
                    let qi = q.gather(Rc::new((i * d..(i + 1) * d).collect()), &[1, d]).unwrap();
                    let yi = composed(qi, g, peak, w, h, d, 0.2);
                    ys.extend_from_slice(yi.value().data());
                    let wi = tape.constant(Tensor::new(&[1, 2], weights[2 * i..2 * i + 2].to_vec()).unwrap());
                    loss = loss.add(yi.mul(wi).unwrap().sum().unwrap()).unwrap();
                }
                (ys, loss)
            };
            let grads = tape.backward(loss).unwrap();
            (y, grads.wrt(q).into_data(), grads.wrt(g).into_data())
        };
        let (a, b) = (run(true), run(false));
        for (x, y) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)).chain(a.2.iter().zip(&b.2)) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}
