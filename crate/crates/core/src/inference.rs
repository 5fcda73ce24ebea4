//! Quantile prediction, F-inversion, dual inference, and mean recovery.
//!
//! Everything here works on the predictor traits rather than on a concrete
//! model, so standardized-space and original-space views (and test rigs)
//! share one code path.

use thiserror::Error;

use crate::autodiff::tensor::Tensor2;
use crate::network::{CdfPredictor, ModelError, QuantilePredictor};

pub const MAX_BISECT_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("percentile {0} outside (0, 1)")]
    TauOutOfRange(f64),
    #[error("bisection tolerance {0} must be positive")]
    BadTolerance(f64),
    #[error("blend weight {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("mean grid needs n >= 2, got {0}")]
    GridTooSmall(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Bisection output: one value per row, with rows flagged where the target
/// percentile could not be bracketed and the nearer interval endpoint was
/// returned instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub values: Vec<f64>,
    pub saturated: Vec<bool>,
}

impl Inversion {
    pub fn any_saturated(&self) -> bool {
        self.saturated.iter().any(|&s| s)
    }
}

/// Solve `F(y, x_r) = tau` per row by bisection.
///
/// The search interval is the training range of the target padded by half its
/// width on each side. F is monotone by construction, so sign bisection
/// converges; iteration stops once the interval is narrower than `tol` or
/// after [`MAX_BISECT_ITERS`] halvings.
pub fn invert_f<F: CdfPredictor>(
    f: &F,
    tau: f64,
    x: &Tensor2,
    tol: f64,
) -> Result<Inversion, InferenceError> {
    invert_f_rows(f, &vec![tau; x.rows()], x, tol)
}

/// As [`invert_f`] with a separate target percentile per row.
pub fn invert_f_rows<F: CdfPredictor>(
    f: &F,
    taus: &[f64],
    x: &Tensor2,
    tol: f64,
) -> Result<Inversion, InferenceError> {
    if !(tol > 0.0) {
        return Err(InferenceError::BadTolerance(tol));
    }
    for &tau in taus {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(InferenceError::TauOutOfRange(tau));
        }
    }
    let n = x.rows();
    let (y_min, y_max) = f.y_range();
    let range = y_max - y_min;
    let lo0 = y_min - 0.5 * range;
    let hi0 = y_max + 0.5 * range;

    let p_lo = f.cdf_batch(lo0, x)?;
    let p_hi = f.cdf_batch(hi0, x)?;

    let mut lo = vec![lo0; n];
    let mut hi = vec![hi0; n];
    let mut values = vec![0.0; n];
    let mut saturated = vec![false; n];
    let mut active: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        let (dl, dh) = (p_lo[r] - taus[r], p_hi[r] - taus[r]);
        if dl * dh > 0.0 {
            saturated[r] = true;
            values[r] = if dl.abs() <= dh.abs() { lo0 } else { hi0 };
        } else {
            active.push(r);
        }
    }

    // all active intervals share the same width, so one check covers them
    let mut width = hi0 - lo0;
    let mut iters = 0;
    while !active.is_empty() && width >= tol && iters < MAX_BISECT_ITERS {
        let mids: Vec<f64> = (0..n).map(|r| 0.5 * (lo[r] + hi[r])).collect();
        let probs = f.cdf_rows(&mids, x)?;
        for &r in &active {
            if probs[r] < taus[r] {
                lo[r] = mids[r];
            } else {
                hi[r] = mids[r];
            }
        }
        width *= 0.5;
        iters += 1;
    }
    for r in active {
        values[r] = 0.5 * (lo[r] + hi[r]);
    }
    Ok(Inversion { values, saturated })
}

/// Blend the direct quantile output with the F-inverted value:
/// `alpha * Q(tau, x) + (1 - alpha) * invert_f(tau, x)`.
///
/// The endpoints bypass the unused side entirely, so `alpha = 1` is
/// bit-identical to the direct quantile and `alpha = 0` to the inversion.
pub fn dual_predict_quantile<Q: QuantilePredictor, F: CdfPredictor>(
    q: &Q,
    f: &F,
    tau: f64,
    x: &Tensor2,
    alpha: f64,
    tol: f64,
) -> Result<Vec<f64>, InferenceError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(InferenceError::BadAlpha(alpha));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(InferenceError::TauOutOfRange(tau));
    }
    if alpha == 1.0 {
        return Ok(q.quantile_batch(tau, x)?);
    }
    let inverted = invert_f(f, tau, x, tol)?;
    if alpha == 0.0 {
        return Ok(inverted.values);
    }
    let direct = q.quantile_batch(tau, x)?;
    Ok(direct
        .iter()
        .zip(&inverted.values)
        .map(|(&d, &v)| alpha * d + (1.0 - alpha) * v)
        .collect())
}

/// The percentile grid for mean recovery: `n + 2` nodes spanning
/// `[0.01, 0.99]`.
pub fn mean_grid(n: usize) -> Vec<f64> {
    (0..=n + 1)
        .map(|i| 0.01 + 0.98 * i as f64 / (n + 1) as f64)
        .collect()
}

/// Conditional mean by trapezoidal integration of the quantile function over
/// the truncated percentile range, normalized by the truncated mass so a
/// constant quantile surface returns the constant.
pub fn predict_mean<Q: QuantilePredictor>(
    q: &Q,
    x: &Tensor2,
    n: usize,
) -> Result<Vec<f64>, InferenceError> {
    mean_over_grid(n, x.rows(), |tau| Ok(q.quantile_batch(tau, x)?))
}

/// As [`predict_mean`] with every grid node evaluated in dual mode.
pub fn dual_predict_mean<Q: QuantilePredictor, F: CdfPredictor>(
    q: &Q,
    f: &F,
    x: &Tensor2,
    n: usize,
    alpha: f64,
    tol: f64,
) -> Result<Vec<f64>, InferenceError> {
    mean_over_grid(n, x.rows(), |tau| {
        dual_predict_quantile(q, f, tau, x, alpha, tol)
    })
}

fn mean_over_grid(
    n: usize,
    rows: usize,
    mut eval: impl FnMut(f64) -> Result<Vec<f64>, InferenceError>,
) -> Result<Vec<f64>, InferenceError> {
    if n < 2 {
        return Err(InferenceError::GridTooSmall(n));
    }
    let grid = mean_grid(n);
    let last = grid.len() - 1;
    let mut acc = vec![0.0; rows];
    for (i, &tau) in grid.iter().enumerate() {
        let vals = eval(tau)?;
        let w = if i == 0 || i == last { 0.5 } else { 1.0 };
        for (a, &v) in acc.iter_mut().zip(&vals) {
            *a += w * v;
        }
    }
    let denom = (n + 1) as f64;
    Ok(acc.into_iter().map(|a| a / denom).collect())
}

/// The median is the quantile surface at `tau = 0.5`.
pub fn predict_median<Q: QuantilePredictor>(
    q: &Q,
    x: &Tensor2,
) -> Result<Vec<f64>, InferenceError> {
    Ok(q.quantile_batch(0.5, x)?)
}

/// Dual-mode median.
pub fn dual_predict_median<Q: QuantilePredictor, F: CdfPredictor>(
    q: &Q,
    f: &F,
    x: &Tensor2,
    alpha: f64,
    tol: f64,
) -> Result<Vec<f64>, InferenceError> {
    dual_predict_quantile(q, f, 0.5, x, alpha, tol)
}
