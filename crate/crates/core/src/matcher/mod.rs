//! Differentiable dense matching with confidence-based filtering.

mod dense;
mod features;

pub use dense::{query_grid, soft_match, SoftArgmaxOp, SoftMatches, WINDOW_RADIUS};
pub use features::{extract_features, grayscale, FeatureMap, FLAT_STD};

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};

/// Fewer surviving matches than this leave the relative pose underdetermined.
pub const MIN_MATCHES: usize = 8;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("only {found} matches survive filtering, need at least {MIN_MATCHES}")]
    InsufficientMatches { found: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub patch: usize,
    pub stride: usize,
    pub temperature: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            patch: 7,
            stride: 4,
            temperature: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum FilterPolicy {
    NoFiltering,
    #[default]
    FixedAtInit,
    Adaptive,
}

impl FilterPolicy {
    pub const ALL: [FilterPolicy; 3] = [FilterPolicy::NoFiltering, FilterPolicy::FixedAtInit, FilterPolicy::Adaptive];
}

impl fmt::Display for FilterPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterPolicy::NoFiltering => "NoFiltering",
            FilterPolicy::FixedAtInit => "FixedAtInit",
            FilterPolicy::Adaptive => "Adaptive",
        })
    }
}

impl FromStr for FilterPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "nofiltering" | "none" => Ok(FilterPolicy::NoFiltering),
            "fixedatinit" | "fixed" => Ok(FilterPolicy::FixedAtInit),
            "adaptive" => Ok(FilterPolicy::Adaptive),
            _ => Err(format!("unknown filter policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    /// Reference pixel.
    pub x: [f64; 2],
    /// Matched position in the generated image.
    pub y: [f64; 2],
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub policy: FilterPolicy,
    pub threshold: f64,
    /// Reference positions frozen at initialization (FixedAtInit only).
    pub frozen: Option<Vec<[f64; 2]>>,
}

impl MatchSet {
    pub fn unfiltered(matches: Vec<Match>) -> Self {
        Self {
            matches,
            policy: FilterPolicy::NoFiltering,
            threshold: 0.0,
            frozen: None,
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// CSV with header `qx,qy,mx,my,confidence`.
    pub fn write_csv(&self, path: &Path) -> Result<(), MatchError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "qx,qy,mx,my,confidence")?;
        for m in &self.matches {
            writeln!(out, "{},{},{},{},{}", m.x[0], m.x[1], m.y[0], m.y[1], m.confidence)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Dense matches between two images on one tape, with the matched
/// positions still attached to the graph.
pub struct DenseMatches<'t> {
    pub soft: SoftMatches<'t>,
}

impl<'t> DenseMatches<'t> {
    pub fn positions(&self) -> Var<'t> {
        self.soft.positions
    }

    pub fn to_match_set(&self) -> MatchSet {
        let y = self.soft.positions.value();
        let matches = self
            .soft
            .queries
            .iter()
            .zip(&self.soft.confidence)
            .enumerate()
            .map(|(i, (&(qx, qy), &confidence))| Match {
                x: [qx as f64, qy as f64],
                y: [y.data()[2 * i], y.data()[2 * i + 1]],
                confidence,
            })
            .collect();
        MatchSet::unfiltered(matches)
    }
}

/// Extracts features from both images and soft-matches every matchable
/// reference query on the stride grid.
pub fn match_dense<'t>(tape: &'t Tape, reference: Var<'t>, generated: Var<'t>, config: &MatcherConfig) -> Result<DenseMatches<'t>, MatchError> {
    let fr = extract_features(tape, reference, config.patch)?;
    let fg = extract_features(tape, generated, config.patch)?;
    // Queries closer to the border than half a patch see clamped descriptors.
    let margin = config.patch / 2;
    let queries: Vec<(usize, usize)> = query_grid(fr.width, fr.height, config.stride)
        .into_iter()
        .filter(|&(x, y)| x >= margin && y >= margin && x + margin < fr.width && y + margin < fr.height)
        .collect();
    Ok(DenseMatches {
        soft: soft_match(&fr, &fg, &queries, config.temperature)?,
    })
}

/// Non-differentiable convenience wrapper around [`match_dense`].
pub fn match_images(reference: &crate::imageio::Image, generated: &crate::imageio::Image, config: &MatcherConfig) -> Result<MatchSet, MatchError> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(reference.to_tensor()), tape.constant(generated.to_tensor()));
    Ok(match_dense(&tape, a, b, config)?.to_match_set())
}

/// Confidence filter that carries the frozen query set between iterations.
#[derive(Debug, Clone)]
pub struct MatchFilter {
    pub policy: FilterPolicy,
    pub threshold: f64,
    frozen: Option<Vec<[f64; 2]>>,
}

impl MatchFilter {
    pub fn new(policy: FilterPolicy, threshold: f64) -> Self {
        Self {
            policy,
            threshold,
            frozen: None,
        }
    }

    pub fn frozen(&self) -> Option<&[[f64; 2]]> {
        self.frozen.as_deref()
    }

    /// Indices into `set.matches` that the policy keeps at this call.
    pub fn select(&mut self, set: &MatchSet) -> Result<Vec<usize>, MatchError> {
        let keep: Vec<usize> = match self.policy {
            FilterPolicy::NoFiltering => (0..set.len()).collect(),
            FilterPolicy::Adaptive => (0..set.len()).filter(|&i| set.matches[i].confidence >= self.threshold).collect(),
            FilterPolicy::FixedAtInit => match &self.frozen {
                None => {
                    let keep: Vec<usize> = (0..set.len()).filter(|&i| set.matches[i].confidence >= self.threshold).collect();
                    if keep.len() >= MIN_MATCHES {
                        self.frozen = Some(keep.iter().map(|&i| set.matches[i].x).collect());
                    }
                    keep
                }
                Some(frozen) => frozen.iter().filter_map(|x| set.matches.iter().position(|m| m.x == *x)).collect(),
            },
        };
        if keep.len() < MIN_MATCHES {
            return Err(MatchError::InsufficientMatches { found: keep.len() });
        }
        Ok(keep)
    }
}

/// Applies `filter` to `set` and returns the surviving matches.
pub fn filter_matches(set: &MatchSet, filter: &mut MatchFilter) -> Result<MatchSet, MatchError> {
    let keep = filter.select(set)?;
    Ok(MatchSet {
        matches: keep.iter().map(|&i| set.matches[i]).collect(),
        policy: filter.policy,
        threshold: filter.threshold,
        frozen: filter.frozen.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_with(conf: &[f64]) -> MatchSet {
        MatchSet::unfiltered(
            conf.iter()
                .enumerate()
                .map(|(i, &c)| Match {
                    x: [i as f64, 0.0],
                    y: [i as f64, 1.0],
                    confidence: c,
                })
                .collect(),
        )
    }

    #[test]
    fn zero_threshold_passes_everything() {
        let s = set_with(&[0.01; 12]);
        for policy in FilterPolicy::ALL {
            let out = filter_matches(&s, &mut MatchFilter::new(policy, 0.0)).unwrap();
            assert_eq!(out.matches, s.matches);
        }
    }

    #[test]
    fn threshold_counts_survivors() {
        let mut conf = vec![0.1, 0.2, 0.3];
        conf.extend([0.9; 8]);
        let s = set_with(&conf);
        let out = filter_matches(&s, &mut MatchFilter::new(FilterPolicy::Adaptive, 0.15)).unwrap();
        assert_eq!(out.len(), 10);
        // Two of three survive, which is below the minimum.
        let few = set_with(&[0.1, 0.2, 0.3]);
        let err = filter_matches(&few, &mut MatchFilter::new(FilterPolicy::Adaptive, 0.15));
        assert!(matches!(err, Err(MatchError::InsufficientMatches { found: 2 })));
        let keep = MatchFilter::new(FilterPolicy::Adaptive, 0.15).select(&set_with(&[0.1, 0.2, 0.3, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]));
        assert_eq!(keep.unwrap().len(), 8);
    }

    #[test]
    fn fixed_policy_freezes_reference_points() {
        let mut filter = MatchFilter::new(FilterPolicy::FixedAtInit, 0.5);
        let first = filter_matches(&set_with(&[0.9, 0.1, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.2]), &mut filter).unwrap();
        let frozen: Vec<[f64; 2]> = first.matches.iter().map(|m| m.x).collect();
        for step in 0..5 {
            let conf: Vec<f64> = (0..10).map(|i| ((i + step) % 3) as f64 * 0.3).collect();
            let out = filter_matches(&set_with(&conf), &mut filter).unwrap();
            assert_eq!(out.matches.iter().map(|m| m.x).collect::<Vec<_>>(), frozen);
        }
        let mut adaptive = MatchFilter::new(FilterPolicy::Adaptive, 0.5);
        let conf: Vec<f64> = (0..10).map(|i| if i < 8 { 0.9 } else { 0.1 }).collect();
        assert_eq!(filter_matches(&set_with(&conf), &mut adaptive).unwrap().len(), 8);
        let conf: Vec<f64> = (0..10).map(|i| if i >= 2 { 0.9 } else { 0.1 }).collect();
        let again = filter_matches(&set_with(&conf), &mut adaptive).unwrap();
        assert_eq!(again.matches[0].x, [2.0, 0.0]);
    }

    fn dense_set(a: &crate::imageio::Image, b: &crate::imageio::Image) -> MatchSet {
        match_images(a, b, &MatcherConfig::default()).unwrap()
    }

    #[test]
    fn identical_images_match_themselves() {
        use crate::epigeo::{Intrinsics, Pose};
        let s = crate::scene::make_scene(0, 800, (2.0, 4.0)).unwrap();
        let img = crate::scene::render(&s, &Pose::identity(), &Intrinsics::standard(64, 64));
        let set = dense_set(&img, &img);
        let confident: Vec<&Match> = set.matches.iter().filter(|m| m.confidence >= 0.15).collect();
        assert!(confident.len() * 2 >= set.len(), "{} of {}", confident.len(), set.len());
        for m in &set.matches {
            assert!((m.x[0] - m.y[0]).hypot(m.x[1] - m.y[1]) < 0.5, "{m:?}");
        }
    }

    #[test]
    fn translation_is_recovered() {
        use crate::epigeo::{Intrinsics, Pose};
        let a = crate::scene::render(&crate::scene::make_scene(4, 800, (2.0, 4.0)).unwrap(), &Pose::identity(), &Intrinsics::standard(64, 64));
        let mut b = a.clone();
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    b.pixel_mut(x, y)[c] = a.pixel(x.saturating_sub(3), y)[c];
                }
            }
        }
        let set = dense_set(&a, &b);
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let dx = median(set.matches.iter().map(|m| m.y[0] - m.x[0]).collect());
        let dy = median(set.matches.iter().map(|m| m.y[1] - m.x[1]).collect());
        assert!((dx - 3.0).abs() < 0.5 && dy.abs() < 0.5, "({dx}, {dy})");
        for m in &set.matches {
            assert!((0.0..=63.0).contains(&m.y[0]) && (0.0..=63.0).contains(&m.y[1]));
            assert!((0.0..=1.0).contains(&m.confidence));
        }
    }

    #[test]
    fn confident_matches_respect_epipolar_geometry() {
        use crate::epigeo::{symmetric_epipolar_distance, FundamentalMatrix, Intrinsics, Pose, RelativePose};
        let k = Intrinsics::standard(128, 128);
        let mut d = Vec::new();
        for seed in 0..2 {
            let s = crate::scene::make_scene(seed, 800, (2.0, 4.0)).unwrap();
            let target = crate::scene::orbit_pose(&Pose::identity(), &s.pivot(), 8.0, 4.0);
            let set = dense_set(&crate::scene::render(&s, &Pose::identity(), &k), &crate::scene::render(&s, &target, &k));
            let f = FundamentalMatrix::from_relative(&RelativePose::between(&Pose::identity(), &target), &k, &k).unwrap();
            d.extend(
                set.matches
                    .iter()
                    .filter(|m| m.confidence >= 0.15)
                    .map(|m| symmetric_epipolar_distance(&f, &m.x.into(), &m.y.into()).unwrap()),
            );
        }
        assert!(d.len() >= 60, "{} confident matches", d.len());
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!(mean < 0.5, "mean {mean}");
    }

    #[test]
    fn policy_names_parse() {
        for p in FilterPolicy::ALL {
            assert_eq!(p.to_string().parse::<FilterPolicy>().unwrap(), p);
        }
        assert!("bogus".parse::<FilterPolicy>().is_err());
    }
}
