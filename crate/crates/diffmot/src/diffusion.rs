//! Forward diffusion machinery: variance schedules, ground-truth padding,
//! and Gaussian noising of latent box embeddings.
//!
//! Both sampling paths live here so there is one audited implementation:
//! training noises encoded ground-truth embeddings along the schedule, and
//! inference draws proposal embeddings directly from a standard normal.

use crate::geom::BBox;
use crate::ndgrad::{Array, Rng};
use crate::nets::{EmbeddingSet, RowTag};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("beta out of range: beta[{index}] = {value}, need 0 < beta < 1")]
    BetaOutOfRange { index: usize, value: f64 },
    #[error("invalid schedule bounds: start {start}, end {end}")]
    InvalidBounds { start: f64, end: f64 },
    #[error("step {step} out of range 0..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("{got} ground-truth boxes exceed the padded size {target}; raise the target count")]
    TooManyBoxes { got: usize, target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Constant,
}

/// Variance schedule tables. `alpha_bar[s]` is the cumulative product of
/// `alpha` through step s, with `alpha_bar[0] = 1`, so it has `steps + 1`
/// entries and is strictly decreasing.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

/// Build a schedule of `steps >= 1` noise levels.
///
/// The linear kind interpolates beta evenly from `beta_start` to
/// `beta_end`; the constant kind uses `beta_start` everywhere.
pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::StepOutOfRange { step: 0, max: 0 });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidBounds {
            start: beta_start,
            end: beta_end,
        });
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Constant => beta_start,
            ScheduleKind::Linear => {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            }
        })
        .collect();
    for (index, &value) in beta.iter().enumerate() {
        if !(0.0 < value && value < 1.0) {
            return Err(DiffusionError::BetaOutOfRange { index, value });
        }
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    debug_assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]));
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// Padding configuration: targets are filled up to `target_count` with
/// boxes whose coordinates are drawn from N(pad_mean, pad_std^2). The
/// std of 1/6 keeps three sigmas inside the unit interval.
#[derive(Debug, Clone, Copy)]
pub struct PadConfig {
    pub target_count: usize,
    pub pad_mean: f64,
    pub pad_std: f64,
}

impl PadConfig {
    pub fn new(target_count: usize) -> Self {
        PadConfig {
            target_count,
            pad_mean: 0.5,
            pad_std: 1.0 / 6.0,
        }
    }
}

/// Pad ground-truth boxes to a fixed count. The real boxes come first, in
/// their input order; the remainder is sampled i.i.d. per coordinate.
pub fn pad_boxes(gt: &[BBox], cfg: &PadConfig, rng: &mut Rng) -> Result<Vec<BBox>, DiffusionError> {
    if gt.len() > cfg.target_count {
        return Err(DiffusionError::TooManyBoxes {
            got: gt.len(),
            target: cfg.target_count,
        });
    }
    let mut out = Vec::with_capacity(cfg.target_count);
    out.extend_from_slice(gt);
    while out.len() < cfg.target_count {
        let mut coord = || rng.normal_scaled(cfg.pad_mean, cfg.pad_std);
        let (cx, cy, w, h) = (coord(), coord(), coord(), coord());
        // Extents may sample negative in the tails; boxes are stored as-is
        // for the encoder, which only sees raw coordinates.
        out.push(BBox { cx, cy, w, h });
    }
    Ok(out)
}

/// Signal/noise mixing pair at step `s`:
/// `(sqrt(alpha_bar[s]), sqrt(1 - alpha_bar[s]))`.
///
/// The trainer applies these inside its graph so the noising formula has a
/// single home shared with [`noise_embeddings`].
pub fn mixing_coefficients(
    schedule: &NoiseSchedule,
    s: usize,
) -> Result<(f64, f64), DiffusionError> {
    if s >= schedule.alpha_bar.len() {
        return Err(DiffusionError::StepOutOfRange {
            step: s,
            max: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar[s];
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

/// Forward-diffuse an embedding set to step `s`:
/// `sqrt(alpha_bar[s]) * z0 + sqrt(1 - alpha_bar[s]) * eps`, eps ~ N(0, I).
///
/// Noise is sampled per element even at s = 0, where it is scaled by zero,
/// so the stream position depends only on the call count.
pub fn noise_embeddings(
    z0: &EmbeddingSet,
    s: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<EmbeddingSet, DiffusionError> {
    let (signal, noise) = mixing_coefficients(schedule, s)?;
    let data: Vec<f64> = z0
        .data
        .data()
        .iter()
        .map(|&z| signal * z + noise * rng.normal())
        .collect();
    Ok(EmbeddingSet {
        data: Array::matrix(z0.count(), z0.dim(), data),
        tags: z0.tags.clone(),
        anchors: None,
    })
}

/// Inference-time proposals: latent embeddings drawn directly from a
/// standard normal, tagged as noised rows.
pub fn sample_latent_proposals(count: usize, dim: usize, rng: &mut Rng) -> EmbeddingSet {
    let data = Array::fill_normal(vec![count, dim], rng);
    EmbeddingSet {
        data,
        tags: vec![RowTag::Noised; count],
        anchors: None,
    }
}
