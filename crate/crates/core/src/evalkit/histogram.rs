use std::io::Write;
use std::path::Path;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::epigeo::{epipolar_distance, DistanceMode, FundamentalMatrix};
use crate::scene::percentile;

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpipolarHistogram {
    pub bin_width: f64,
    pub max_px: f64,
    pub counts: Vec<usize>,
    /// Distances at or above `max_px`.
    pub overflow: usize,
    pub total: usize,
    /// Matches sitting on an epipole, where the distance is undefined.
    pub skipped: usize,
    pub mean: f64,
    pub median: f64,
}

impl EpipolarHistogram {
    pub fn edges(&self) -> Vec<f64> {
        (0..=self.counts.len()).map(|i| i as f64 * self.bin_width).collect()
    }

    /// CSV with header `bin_lo,bin_hi,count`; the overflow bin has `bin_hi = inf`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "bin_lo,bin_hi,count")?;
        let edges = self.edges();
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", edges[i], edges[i + 1], c)?;
        }
        writeln!(out, "{},inf,{}", self.max_px, self.overflow)?;
        out.flush()?;
        Ok(())
    }
}

/// Histogram of epipolar distances of `(x, y)` pairs under `f`.
pub fn epipolar_histogram(
    pairs: &[(Point2<f64>, Point2<f64>)],
    f: &FundamentalMatrix,
    mode: DistanceMode,
    bin_width: f64,
    max_px: f64,
) -> Result<EpipolarHistogram, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::TooFewMatches(0));
    }
    if !(bin_width > 0.0 && max_px > 0.0) {
        return Err(EvalError::Input("bin width and range must be positive".into()));
    }
    let bins = (max_px / bin_width).ceil() as usize;
    let mut counts = vec![0; bins];
    let mut overflow = 0;
    let distances: Vec<f64> = pairs.iter().filter_map(|(x, y)| epipolar_distance(f, x, y, mode).ok()).collect();
    for &d in &distances {
        if d >= max_px {
            overflow += 1;
        } else {
            counts[((d / bin_width) as usize).min(bins - 1)] += 1;
        }
    }
    let total = distances.len();
    Ok(EpipolarHistogram {
        bin_width,
        max_px,
        counts,
        overflow,
        total,
        skipped: pairs.len() - total,
        mean: if total > 0 { distances.iter().sum::<f64>() / total as f64 } else { f64::NAN },
        median: percentile(&distances, 50.0).unwrap_or(f64::NAN),
    })
}
