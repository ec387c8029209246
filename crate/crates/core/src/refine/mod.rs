//! Latent refinement against the epipolar consistency loss.

mod adam;
mod loss;

pub use adam::Adam;
pub use loss::{consistency_loss, evaluate_consistency, huber, ConsistencyLoss, LossWeights};

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor};
use crate::epigeo::{FundamentalMatrix, EPIPOLE_EXCLUSION_PX};
use crate::imageio::Image;
use crate::matcher::{match_dense, MatchError, MatchFilter, MatchSet, MatcherConfig, FilterPolicy};
use crate::sampler::{sample_initial_latent, Generator};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refinement config: {0}")]
    Config(String),
    #[error("generated image is {got:?}, reference is {expected:?}")]
    Resolution { expected: [usize; 2], got: Vec<usize> },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub huber_delta_px: f64,
    pub lambda_rgb: f64,
    pub confidence_threshold: f64,
    pub policy: FilterPolicy,
    pub epipole_exclusion_px: f64,
    pub matcher: MatcherConfig,
    /// Fresh latents tried when the first one yields too few matches.
    pub reseed_attempts: usize,
    /// Keep a snapshot image every this many iterations (0 disables).
    pub snapshot_every: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            iterations: 35,
            learning_rate: 0.025,
            huber_delta_px: 2.0,
            lambda_rgb: 2.5,
            confidence_threshold: 0.15,
            policy: FilterPolicy::FixedAtInit,
            epipole_exclusion_px: EPIPOLE_EXCLUSION_PX,
            matcher: MatcherConfig::default(),
            reseed_attempts: 0,
            snapshot_every: 0,
        }
    }
}

impl RefinementConfig {
    /// Step sizes and the Huber knee must be positive; weights and the
    /// confidence threshold may be zero (which disables them).
    pub fn validate(&self) -> Result<(), RefineError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("huber_delta_px", self.huber_delta_px),
            ("epipole_exclusion_px", self.epipole_exclusion_px),
            ("matcher.temperature", self.matcher.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RefineError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_rgb", self.lambda_rgb), ("confidence_threshold", self.confidence_threshold)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RefineError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.iterations == 0 || self.matcher.stride == 0 || self.matcher.patch.is_multiple_of(2) {
            return Err(RefineError::Config("iterations and stride must be positive, patch odd".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_rgb: self.lambda_rgb,
            huber_delta: self.huber_delta_px,
            epipole_exclusion: self.epipole_exclusion_px,
        }
    }
}

/// Per-iteration scalars. Entry `k` describes the latent after `k` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// `None` when the loss could not be evaluated or was non-finite.
    pub loss: Option<f64>,
    pub epipolar: Option<f64>,
    pub rgb: Option<f64>,
    pub matches: usize,
    /// Generator-specific scalars of the latent (see `Generator::diagnostics`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub entries: Vec<TraceEntry>,
    pub best_iteration: usize,
    pub best_latent: Vec<f64>,
    pub final_latent: Vec<f64>,
    pub latent_shape: Vec<usize>,
    pub seed_attempts: usize,
}

impl RefinementTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.entries.first().and_then(|e| e.loss)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.entries[self.best_iteration].loss
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().and_then(|e| e.loss)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), RefineError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, RefineError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub struct RefinementOutcome {
    /// Image generated from the best-loss latent.
    pub image: Image,
    pub initial_image: Image,
    pub trace: RefinementTrace,
    /// Filtered matches at initialization and at the best iterate.
    pub initial_matches: MatchSet,
    pub best_matches: MatchSet,
    pub snapshots: Vec<(usize, Image)>,
}

/// One forward evaluation: image, filtered matches, loss and gradient.
struct Evaluation {
    image: Image,
    matches: MatchSet,
    loss: f64,
    epipolar: f64,
    rgb: f64,
    count: usize,
    grad: Vec<f64>,
}

fn evaluate<G: Generator>(
    generator: &G,
    reference: &Image,
    f: &FundamentalMatrix,
    config: &RefinementConfig,
    filter: &mut MatchFilter,
    latent: &Tensor,
) -> Result<Evaluation, RefineError> {
    let tape = Tape::new();
    let z = tape.leaf(latent.clone().with_grad());
    let generated = generator.generate(&tape, z)?;
    let shape = generated.shape();
    if shape != [reference.height, reference.width, 3] {
        return Err(RefineError::Resolution {
            expected: [reference.height, reference.width],
            got: shape,
        });
    }
    let dense = match_dense(&tape, tape.constant(reference.to_tensor()), generated, &config.matcher)?;
    let all = dense.to_match_set();
    let keep = filter.select(&all)?;
    let positions = dense
        .positions()
        .gather(Rc::new(keep.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect()), &[keep.len(), 2])?;
    let x: Vec<[f64; 2]> = keep.iter().map(|&i| all.matches[i].x).collect();
    let loss = consistency_loss(&x, positions, f, reference, generated, &config.weights())?;
    let grad = tape.backward(loss.total)?.wrt(z).into_data();
    Ok(Evaluation {
        image: Image::from_tensor(&generated.value()).map_err(|e| RefineError::Config(e.to_string()))?,
        matches: MatchSet {
            matches: keep.iter().map(|&i| all.matches[i]).collect(),
            policy: filter.policy,
            threshold: filter.threshold,
            frozen: filter.frozen().map(<[_]>::to_vec),
        },
        loss: loss.total.value().item(),
        epipolar: loss.epipolar.value().item(),
        rgb: loss.rgb.value().item(),
        count: loss.count,
        grad,
    })
}

/// Loss and latent gradient at `latent`, with `filter` applied to the
/// matches (a FixedAtInit filter freezes on its first call).
pub fn loss_and_gradient<G: Generator>(
    generator: &G,
    reference: &Image,
    f: &FundamentalMatrix,
    config: &RefinementConfig,
    filter: &mut MatchFilter,
    latent: &Tensor,
) -> Result<(f64, Vec<f64>), RefineError> {
    let e = evaluate(generator, reference, f, config, filter, latent)?;
    Ok((e.loss, e.grad))
}

/// Optimizes the starting latent of `generator` so that its image agrees
/// with `reference` under `f`, and returns the best-loss iterate.
pub fn refine<G: Generator>(generator: &G, reference: &Image, f: &FundamentalMatrix, config: &RefinementConfig, init: Tensor) -> Result<RefinementOutcome, RefineError> {
    config.validate()?;
    if init.shape() != generator.latent_shape() {
        return Err(RefineError::Config(format!("latent shape {:?}, generator expects {:?}", init.shape(), generator.latent_shape())));
    }
    let mut filter = MatchFilter::new(config.policy, config.confidence_threshold);
    let first = evaluate(generator, reference, f, config, &mut filter, &init)?;
    let shape = init.shape().to_vec();
    let mut latent = init.into_data();
    let mut adam = Adam::new(latent.len(), config.learning_rate);

    let mut entries = Vec::with_capacity(config.iterations + 1);
    let mut snapshots = Vec::new();
    let initial_image = first.image.clone();
    let initial_matches = first.matches.clone();
    let mut best = (0usize, first.loss, latent.clone(), first.image.clone(), first.matches.clone());
    let mut current = Some(first);

    for iteration in 0..=config.iterations {
        let mut flags = Vec::new();
        let diagnostics: BTreeMap<String, f64> = generator
            .diagnostics(&Tensor::new(&shape, latent.clone())?)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let eval = match current.take() {
            Some(e) => Some(e),
            None => {
                let t = Tensor::new(&shape, latent.clone())?;
                match evaluate(generator, reference, f, config, &mut filter, &t) {
                    Ok(e) => Some(e),
                    Err(RefineError::Match(MatchError::InsufficientMatches { found })) => {
                        flags.push(format!("insufficient_matches:{found}"));
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        let Some(eval) = eval else {
            entries.push(TraceEntry {
                iteration,
                loss: None,
                epipolar: None,
                rgb: None,
                matches: 0,
                diagnostics,
                flags,
            });
            continue;
        };
        let finite = eval.loss.is_finite();
        if !finite {
            flags.push("non_finite_loss".into());
        } else if eval.loss < best.1 || best.1.is_nan() {
            best = (iteration, eval.loss, latent.clone(), eval.image.clone(), eval.matches.clone());
        }
        if config.snapshot_every > 0 && iteration % config.snapshot_every == 0 {
            snapshots.push((iteration, eval.image.clone()));
        }
        if iteration < config.iterations && finite && !adam.update(&mut latent, &eval.grad) {
            flags.push("non_finite_gradient".into());
        }
        entries.push(TraceEntry {
            iteration,
            loss: finite.then_some(eval.loss),
            epipolar: finite.then_some(eval.epipolar),
            rgb: finite.then_some(eval.rgb),
            matches: eval.count,
            diagnostics,
            flags,
        });
    }

    let (best_iteration, _, best_latent, image, best_matches) = best;
    Ok(RefinementOutcome {
        image,
        initial_image,
        trace: RefinementTrace {
            entries,
            best_iteration,
            best_latent,
            final_latent: latent,
            latent_shape: shape,
            seed_attempts: 1,
        },
        initial_matches,
        best_matches,
        snapshots,
    })
}

/// Outcome for a pair without epipolar geometry (zero baseline): the
/// initial image is returned unchanged and the trace has a single flagged
/// entry.
pub fn passthrough<G: Generator>(generator: &G, init: Tensor, flag: &str) -> Result<RefinementOutcome, RefineError> {
    let tape = Tape::new();
    let generated = generator.generate(&tape, tape.constant(init.clone()))?;
    let image = Image::from_tensor(&generated.value()).map_err(|e| RefineError::Config(e.to_string()))?;
    let diagnostics = generator.diagnostics(&init).into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let latent = init.data().to_vec();
    Ok(RefinementOutcome {
        initial_image: image.clone(),
        image,
        trace: RefinementTrace {
            entries: vec![TraceEntry {
                iteration: 0,
                loss: None,
                epipolar: None,
                rgb: None,
                matches: 0,
                diagnostics,
                flags: vec![flag.to_string()],
            }],
            best_iteration: 0,
            best_latent: latent.clone(),
            final_latent: latent,
            latent_shape: init.shape().to_vec(),
            seed_attempts: 1,
        },
        initial_matches: MatchSet::unfiltered(Vec::new()),
        best_matches: MatchSet::unfiltered(Vec::new()),
        snapshots: Vec::new(),
    })
}

/// [`refine`] from a sampled latent, retrying with consecutive seeds while
/// the initial image has too few confident matches.
pub fn refine_from_seed<G: Generator>(generator: &G, reference: &Image, f: &FundamentalMatrix, config: &RefinementConfig, seed: u64) -> Result<RefinementOutcome, RefineError> {
    let shape = generator.latent_shape();
    let mut attempt = 0;
    loop {
        let init = sample_initial_latent(seed.wrapping_add(attempt as u64), &shape);
        match refine(generator, reference, f, config, init) {
            Err(RefineError::Match(MatchError::InsufficientMatches { .. })) if attempt < config.reseed_attempts => attempt += 1,
            Ok(mut out) => {
                out.trace.seed_attempts = attempt + 1;
                return Ok(out);
            }
            Err(e) => return Err(e),
        }
    }
}
