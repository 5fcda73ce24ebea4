//! Seeded draws of percentiles, evaluation values, anchors, and batch order.
//!
//! Each purpose gets its own ChaCha stream derived from one seed, so training
//! modes that skip a term consume nothing from the streams other terms use,
//! and run-to-run sequences are bit-identical for a given seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::tensor::Tensor2;
use crate::network::TAU_EPS;

const STREAM_TAU: u64 = 1;
const STREAM_YTILDE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_ANCHOR: u64 = 4;

/// The nine decile percentiles used for anchors and scoring.
pub const DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("beta prior parameters must be positive, got ({0}, {1})")]
    BadBeta(f64, f64),
    #[error("tau clip range ({0}, {1}) is not inside (0, 1)")]
    BadClip(f64, f64),
    #[error("value bounds ({0}, {1}) are not an increasing finite pair")]
    BadBounds(f64, f64),
    #[error("value sampling requested but no target bounds were configured")]
    NoBounds,
    #[error("anchor grid is empty")]
    EmptyAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TauPrior {
    #[default]
    Uniform,
    Beta { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub tau_prior: TauPrior,
    pub tau_clip: (f64, f64),
    /// Standardized target bounds from the training split; required for
    /// value sampling.
    pub y_bounds: Option<(f64, f64)>,
    pub tau_anchors: Vec<f64>,
    pub y_anchors: Vec<f64>,
}

impl SamplerConfig {
    pub fn new(seed: u64, batch_size: usize) -> Self {
        Self {
            seed,
            batch_size,
            tau_prior: TauPrior::Uniform,
            tau_clip: (TAU_EPS, 1.0 - TAU_EPS),
            y_bounds: None,
            tau_anchors: DECILES.to_vec(),
            y_anchors: Vec::new(),
        }
    }
}

pub struct Sampler {
    cfg: SamplerConfig,
    tau_rng: ChaCha8Rng,
    y_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    anchor_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self, SamplerError> {
        if cfg.batch_size == 0 {
            return Err(SamplerError::ZeroBatch);
        }
        if let TauPrior::Beta { alpha, beta } = cfg.tau_prior {
            if !(alpha > 0.0 && beta > 0.0) {
                return Err(SamplerError::BadBeta(alpha, beta));
            }
        }
        let (lo, hi) = cfg.tau_clip;
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return Err(SamplerError::BadClip(lo, hi));
        }
        if let Some((lo, hi)) = cfg.y_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(SamplerError::BadBounds(lo, hi));
            }
        }
        let seed = cfg.seed;
        Ok(Self {
            cfg,
            tau_rng: stream(seed, STREAM_TAU),
            y_rng: stream(seed, STREAM_YTILDE),
            shuffle_rng: stream(seed, STREAM_SHUFFLE),
            anchor_rng: stream(seed, STREAM_ANCHOR),
        })
    }

    /// Percentiles from the configured prior, clipped to the working range.
    pub fn sample_tau(&mut self, n: usize) -> Vec<f64> {
        let (lo, hi) = self.cfg.tau_clip;
        match self.cfg.tau_prior {
            TauPrior::Uniform => (0..n)
                .map(|_| self.tau_rng.random_range(0.0f64..1.0).clamp(lo, hi))
                .collect(),
            TauPrior::Beta { alpha, beta } => {
                // validated in new()
                let dist = Beta::new(alpha, beta).expect("validated beta parameters");
                (0..n)
                    .map(|_| dist.sample(&mut self.tau_rng).clamp(lo, hi))
                    .collect()
            }
        }
    }

    /// Evaluation values uniform over the configured target bounds.
    pub fn sample_ytilde(&mut self, n: usize) -> Result<Vec<f64>, SamplerError> {
        let (lo, hi) = self.cfg.y_bounds.ok_or(SamplerError::NoBounds)?;
        Ok((0..n).map(|_| self.y_rng.random_range(lo..hi)).collect())
    }

    /// Per-example anchor percentiles drawn from the fixed grid.
    pub fn sample_tau_anchor(&mut self, n: usize) -> Result<Vec<f64>, SamplerError> {
        draw_from(&self.cfg.tau_anchors, n, &mut self.anchor_rng)
    }

    /// Per-example anchor values drawn from the fixed grid.
    pub fn sample_y_anchor(&mut self, n: usize) -> Result<Vec<f64>, SamplerError> {
        draw_from(&self.cfg.y_anchors, n, &mut self.anchor_rng)
    }

    /// Row indices for one epoch: a fresh shuffle chunked by batch size, the
    /// final batch short when the row count is not a multiple.
    pub fn epoch_batches(&mut self, n_rows: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n_rows).collect();
        order.shuffle(&mut self.shuffle_rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Materialized minibatches of one epoch over a feature matrix and target
    /// column.
    pub fn minibatches(&mut self, x: &Tensor2, y: &[f64]) -> Vec<(Tensor2, Vec<f64>)> {
        debug_assert_eq!(x.rows(), y.len());
        self.epoch_batches(x.rows())
            .into_iter()
            .map(|idx| (gather_rows(x, &idx), idx.iter().map(|&i| y[i]).collect()))
            .collect()
    }
}

fn draw_from(grid: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SamplerError> {
    if grid.is_empty() {
        return Err(SamplerError::EmptyAnchors);
    }
    Ok((0..n)
        .map(|_| grid[rng.random_range(0..grid.len())])
        .collect())
}

/// Copy the given rows of `x` into a new tensor, in index order.
pub fn gather_rows(x: &Tensor2, indices: &[usize]) -> Tensor2 {
    let cols = x.cols();
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
    }
    Tensor2::raw(indices.len(), cols, data)
}
