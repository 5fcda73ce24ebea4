//! Evaluation metrics and report assembly.
//!
//! The quantile score `q_s` is the sum over the nine deciles of the mean
//! pinball loss, the headline comparison number. Reports carry no wall-clock
//! or host information: two runs from one seed must serialize identically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::tensor::Tensor2;
use crate::losses::{self, pinball};
use crate::network::{CdfPredictor, FnQuantile, ModelError, QuantilePredictor};
use crate::sampler::DECILES;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("predictions and targets differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("percentile grid must be strictly increasing inside (0, 1) with at least two points")]
    BadGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
}

/// Sum over deciles of the mean pinball loss, plus the per-decile means.
pub fn qs_score<Q: QuantilePredictor>(
    q: &Q,
    x: &Tensor2,
    y: &[f64],
) -> Result<(f64, [f64; 9]), MetricsError> {
    if x.rows() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if y.len() != x.rows() {
        return Err(MetricsError::LengthMismatch {
            left: y.len(),
            right: x.rows(),
        });
    }
    let mut per = [0.0; 9];
    for (k, &tau) in DECILES.iter().enumerate() {
        let preds = q.quantile_batch(tau, x)?;
        per[k] = preds
            .iter()
            .zip(y)
            .map(|(&p, &yi)| pinball(tau, yi, p))
            .sum::<f64>()
            / y.len() as f64;
    }
    Ok((per.iter().sum(), per))
}

pub fn mae(pred: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if pred.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred.len(),
            right: y.len(),
        });
    }
    Ok(pred.iter().zip(y).map(|(&p, &yi)| (yi - p).abs()).sum::<f64>() / y.len() as f64)
}

pub fn mse(pred: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if pred.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred.len(),
            right: y.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(y)
        .map(|(&p, &yi)| {
            let d = yi - p;
            d * d
        })
        .sum::<f64>()
        / y.len() as f64)
}

/// Uniform percentile grid of `n` points spanning `[0.005, 0.995]`.
pub fn crossing_grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.005 + 0.99 * k as f64 / (n - 1) as f64)
        .collect()
}

/// Fraction of adjacent grid evaluations that decrease: pairs with
/// `Q(tau_{k+1}, x) < Q(tau_k, x)` over rows times pairs.
pub fn crossing_rate<Q: QuantilePredictor>(
    q: &Q,
    x: &Tensor2,
    grid: &[f64],
) -> Result<f64, MetricsError> {
    if x.rows() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if grid.len() < 2
        || grid.windows(2).any(|w| w[0] >= w[1])
        || grid.iter().any(|&t| !(t > 0.0 && t < 1.0))
    {
        return Err(MetricsError::BadGrid);
    }
    let mut prev = q.quantile_batch(grid[0], x)?;
    let mut crossings = 0usize;
    for &tau in &grid[1..] {
        let cur = q.quantile_batch(tau, x)?;
        crossings += cur.iter().zip(&prev).filter(|(c, p)| c < p).count();
        prev = cur;
    }
    Ok(crossings as f64 / (x.rows() * (grid.len() - 1)) as f64)
}

/// Empirical coverage per percentile: the fraction of rows with
/// `y <= Q(tau, x)`.
pub fn coverage<Q: QuantilePredictor>(
    q: &Q,
    x: &Tensor2,
    y: &[f64],
    taus: &[f64],
) -> Result<Vec<CoveragePoint>, MetricsError> {
    if x.rows() == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if y.len() != x.rows() {
        return Err(MetricsError::LengthMismatch {
            left: y.len(),
            right: x.rows(),
        });
    }
    taus.iter()
        .map(|&tau| {
            let preds = q.quantile_batch(tau, x)?;
            let hit = preds.iter().zip(y).filter(|(&p, &yi)| yi <= p).count();
            Ok(CoveragePoint {
                tau,
                empirical: hit as f64 / y.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub tau: f64,
    pub empirical: f64,
}

/// Per-decile gap against a reference quantile surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGap {
    /// Mean absolute difference to the reference, per decile.
    pub per_decile: Vec<f64>,
    pub mean: f64,
    /// The reference surface's own quantile score on this data.
    pub oracle_qs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// "standardized" or "original"; the unit system of every value below.
    pub units: String,
    pub n_rows: usize,
    pub qs: f64,
    pub per_decile: Vec<f64>,
    pub mae: f64,
    pub mse: f64,
    pub crossing_rate: f64,
    pub crossing_grid: usize,
    pub coverage: Vec<CoveragePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recover_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recover_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_gap: Option<OracleGap>,
}

pub const CROSSING_GRID_LEN: usize = 101;

/// Assemble the standard evaluation report for a quantile surface, optionally
/// with its CDF counterpart and a reference quantile oracle.
pub fn eval_report(
    q: &dyn QuantilePredictor,
    f: Option<&dyn CdfPredictor>,
    x: &Tensor2,
    y: &[f64],
    units: &str,
    oracle: Option<&dyn Fn(f64, &[f64]) -> f64>,
) -> Result<EvalReport, MetricsError> {
    eval_report_with_grid(q, f, x, y, units, oracle, &crossing_grid(CROSSING_GRID_LEN))
}

/// As [`eval_report`] but with a caller-chosen crossing grid. Surfaces that
/// only exist at fixed percentiles (decile-net baselines) are scored for
/// crossings on those percentiles instead of the dense default grid.
pub fn eval_report_with_grid(
    q: &dyn QuantilePredictor,
    f: Option<&dyn CdfPredictor>,
    x: &Tensor2,
    y: &[f64],
    units: &str,
    oracle: Option<&dyn Fn(f64, &[f64]) -> f64>,
    grid: &[f64],
) -> Result<EvalReport, MetricsError> {
    let (qs, per_decile) = qs_score(&Wrap(q), x, y)?;
    let median = Wrap(q).quantile_batch(0.5, x)?;
    let mae = mae(&median, y)?;
    let mse = mse(&median, y)?;
    let crossing = crossing_rate(&Wrap(q), x, grid)?;
    let cov = coverage(&Wrap(q), x, y, &DECILES)?;

    let (recover_q, recover_f) = match f {
        Some(f) => {
            let mut rq = 0.0;
            let mut rf = 0.0;
            let (y_lo, y_hi) = f.y_range();
            for (k, &tau) in DECILES.iter().enumerate() {
                let taus = vec![tau; x.rows()];
                rq += losses::recover_q(&Wrap(q), &WrapF(f), &taus, x)?;
                // probe values spread over the training range
                let yt = y_lo + (y_hi - y_lo) * (k as f64 + 0.5) / 9.0;
                let yts = vec![yt; x.rows()];
                rf += losses::recover_f(&Wrap(q), &WrapF(f), &yts, x)?;
            }
            (Some(rq / 9.0), Some(rf / 9.0))
        }
        None => (None, None),
    };

    let oracle_gap = match oracle {
        Some(oracle) => {
            let mut per = Vec::with_capacity(9);
            for &tau in &DECILES {
                let pred = Wrap(q).quantile_batch(tau, x)?;
                let gap = pred
                    .iter()
                    .enumerate()
                    .map(|(r, &p)| {
                        let row = &x.data()[r * x.cols()..(r + 1) * x.cols()];
                        (p - oracle(tau, row)).abs()
                    })
                    .sum::<f64>()
                    / x.rows() as f64;
                per.push(gap);
            }
            let mean = per.iter().sum::<f64>() / 9.0;
            let reference = FnQuantile(|tau: f64, row: &[f64]| oracle(tau, row));
            let (oracle_qs, _) = qs_score(&reference, x, y)?;
            Some(OracleGap {
                per_decile: per,
                mean,
                oracle_qs,
            })
        }
        None => None,
    };

    Ok(EvalReport {
        units: units.to_string(),
        n_rows: x.rows(),
        qs,
        per_decile: per_decile.to_vec(),
        mae,
        mse,
        crossing_rate: crossing,
        crossing_grid: grid.len(),
        coverage: cov,
        recover_q,
        recover_f,
        oracle_gap,
    })
}

// dyn-ref adapters so the assembly entry point stays object-based while the
// individual metrics stay generic
struct Wrap<'a>(&'a dyn QuantilePredictor);

impl QuantilePredictor for Wrap<'_> {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.quantile_batch(tau, x)
    }

    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.quantile_rows(taus, x)
    }
}

struct WrapF<'a>(&'a dyn CdfPredictor);

impl CdfPredictor for WrapF<'_> {
    fn cdf_batch(&self, y: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.cdf_batch(y, x)
    }

    fn cdf_rows(&self, ys: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.cdf_rows(ys, x)
    }

    fn y_range(&self) -> (f64, f64) {
        self.0.y_range()
    }
}

impl EvalReport {
    pub fn csv_header() -> Vec<String> {
        let mut cols = vec!["units".into(), "n_rows".into(), "qs".into()];
        for tau in DECILES {
            cols.push(format!("pinball_q{:02.0}", tau * 100.0));
        }
        cols.extend(["mae".into(), "mse".into(), "crossing_rate".into()]);
        for tau in DECILES {
            cols.push(format!("coverage_q{:02.0}", tau * 100.0));
        }
        cols.extend([
            "recover_q".into(),
            "recover_f".into(),
            "oracle_gap_mean".into(),
            "oracle_qs".into(),
        ]);
        cols
    }

    pub fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut cols = vec![
            self.units.clone(),
            self.n_rows.to_string(),
            self.qs.to_string(),
        ];
        cols.extend(self.per_decile.iter().map(|v| v.to_string()));
        cols.extend([
            self.mae.to_string(),
            self.mse.to_string(),
            self.crossing_rate.to_string(),
        ]);
        cols.extend(self.coverage.iter().map(|c| c.empirical.to_string()));
        cols.push(opt(self.recover_q));
        cols.push(opt(self.recover_f));
        cols.push(opt(self.oracle_gap.as_ref().map(|g| g.mean)));
        cols.push(opt(self.oracle_gap.as_ref().map(|g| g.oracle_qs)));
        cols
    }
}
