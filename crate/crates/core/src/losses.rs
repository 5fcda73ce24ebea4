//! Loss terms for joint quantile / distribution training.
//!
//! Every term exists in two flavors that must agree numerically: a tape
//! builder used by training (gradients flow through model parameters) and a
//! plain form over the predictor traits used for evaluation and as a check.
//!
//! Pinball, CDF likelihood, and recovery terms are means over the batch.
//! Monotonicity and duality hinge penalties are sums: a batch with no
//! violations contributes exactly zero regardless of size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::{softplus, Tensor2};
use crate::network::{
    BoundModel, CdfPredictor, DdrModel, ModelError, QuantilePredictor, TAU_EPS,
};

/// Probe step for the finite-difference monotonicity and duality penalties.
pub const PROBE_EPS: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch field {field} has {got} entries, expected {expected}")]
    BatchLength {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("probe step {0} must be positive and leave tau probes inside (0, 1)")]
    BadProbeStep(f64),
    #[error("tau {0} is outside (0, 1)")]
    TauOutOfRange(f64),
    #[error("no loss term has a nonzero weight")]
    NoActiveTerms,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pinball (check) loss for a single prediction.
pub fn pinball(tau: f64, y: f64, y_hat: f64) -> f64 {
    let r = y - y_hat;
    tau * r.max(0.0) + (1.0 - tau) * (-r).max(0.0)
}

/// Negative log-likelihood of a Bernoulli indicator under log-odds `eta`,
/// in the overflow-free form `softplus(eta) - I * eta`.
pub fn cdf_nll(le: bool, eta: f64) -> f64 {
    softplus(eta) - if le { eta } else { 0.0 }
}

/// One scalar per loss term; doubles as the weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub median: f64,
    pub pinball_mc: f64,
    pub pinball_anchor: f64,
    pub cdf_nll_mc: f64,
    pub cdf_nll_anchor: f64,
    pub grad_q: f64,
    pub grad_f: f64,
    pub recover_q: f64,
    pub recover_f: f64,
    pub dual_q: f64,
    pub dual_f: f64,
}

impl LossTerms {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Median => self.median,
            Term::PinballMc => self.pinball_mc,
            Term::PinballAnchor => self.pinball_anchor,
            Term::CdfNllMc => self.cdf_nll_mc,
            Term::CdfNllAnchor => self.cdf_nll_anchor,
            Term::GradQ => self.grad_q,
            Term::GradF => self.grad_f,
            Term::RecoverQ => self.recover_q,
            Term::RecoverF => self.recover_f,
            Term::DualQ => self.dual_q,
            Term::DualF => self.dual_f,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) {
        match term {
            Term::Median => self.median = value,
            Term::PinballMc => self.pinball_mc = value,
            Term::PinballAnchor => self.pinball_anchor = value,
            Term::CdfNllMc => self.cdf_nll_mc = value,
            Term::CdfNllAnchor => self.cdf_nll_anchor = value,
            Term::GradQ => self.grad_q = value,
            Term::GradF => self.grad_f = value,
            Term::RecoverQ => self.recover_q = value,
            Term::RecoverF => self.recover_f = value,
            Term::DualQ => self.dual_q = value,
            Term::DualF => self.dual_f = value,
        }
    }

    pub fn weighted_total(&self, weights: &LossTerms) -> f64 {
        Term::ALL
            .iter()
            .map(|&t| weights.get(t) * self.get(t))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Median,
    PinballMc,
    PinballAnchor,
    CdfNllMc,
    CdfNllAnchor,
    GradQ,
    GradF,
    RecoverQ,
    RecoverF,
    DualQ,
    DualF,
}

impl Term {
    pub const ALL: [Term; 11] = [
        Term::Median,
        Term::PinballMc,
        Term::PinballAnchor,
        Term::CdfNllMc,
        Term::CdfNllAnchor,
        Term::GradQ,
        Term::GradF,
        Term::RecoverQ,
        Term::RecoverF,
        Term::DualQ,
        Term::DualF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Median => "median",
            Term::PinballMc => "pinball_mc",
            Term::PinballAnchor => "pinball_anchor",
            Term::CdfNllMc => "cdf_nll_mc",
            Term::CdfNllAnchor => "cdf_nll_anchor",
            Term::GradQ => "grad_q",
            Term::GradF => "grad_f",
            Term::RecoverQ => "recover_q",
            Term::RecoverF => "recover_f",
            Term::DualQ => "dual_q",
            Term::DualF => "dual_f",
        }
    }

    /// Terms that touch the CDF head; absent in quantile-only training.
    pub fn needs_f_head(self) -> bool {
        matches!(
            self,
            Term::CdfNllMc
                | Term::CdfNllAnchor
                | Term::GradF
                | Term::RecoverQ
                | Term::RecoverF
                | Term::DualQ
                | Term::DualF
        )
    }
}

/// Per-term raw values together with the weights that produced `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub weights: LossTerms,
    pub total: f64,
}

/// One training batch in standardized units. Percentile and value samples are
/// drawn per batch element; anchors are resampled from the fixed grids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor2,
    pub y: Vec<f64>,
    pub taus: Vec<f64>,
    pub ytildes: Vec<f64>,
    pub anchor_taus: Vec<f64>,
    pub anchor_ytildes: Vec<f64>,
}

impl Batch {
    pub fn validate(&self) -> Result<usize, LossError> {
        let n = self.x.rows();
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        for (field, len) in [
            ("y", self.y.len()),
            ("taus", self.taus.len()),
            ("ytildes", self.ytildes.len()),
            ("anchor_taus", self.anchor_taus.len()),
            ("anchor_ytildes", self.anchor_ytildes.len()),
        ] {
            if len != n {
                return Err(LossError::BatchLength {
                    field,
                    expected: n,
                    got: len,
                });
            }
        }
        for &t in self.taus.iter().chain(&self.anchor_taus) {
            if !(t > 0.0 && t < 1.0) || !t.is_finite() {
                return Err(LossError::TauOutOfRange(t));
            }
        }
        Ok(n)
    }
}

fn check_probe(eps: f64) -> Result<(), LossError> {
    if !(eps > 0.0 && eps < 0.5 - TAU_EPS) {
        return Err(LossError::BadProbeStep(eps));
    }
    Ok(())
}

/// Shift a percentile so both probes `tau +- eps` stay in the working range.
/// Probe spacing stays exactly `2 * eps`; only the center moves.
pub fn probe_center(tau: f64, eps: f64) -> f64 {
    tau.clamp(TAU_EPS + eps, 1.0 - TAU_EPS - eps)
}

/// Mean pinball loss of a column of predictions on the tape.
fn pinball_on_tape(
    tape: &mut Tape,
    taus: &Tensor2,
    y: Var,
    q: Var,
) -> Result<Var, ModelError> {
    let tau = tape.input(taus.clone());
    let r = tape.sub(y, q)?;
    let pos = tape.relu(r)?;
    let neg_r = tape.neg(r)?;
    let neg = tape.relu(neg_r)?;
    let tau_flip = tape.neg(tau)?;
    let one_minus = tape.add_scalar(tau_flip, 1.0)?;
    let lhs = tape.mul(tau, pos)?;
    let rhs = tape.mul(one_minus, neg)?;
    let sum = tape.add(lhs, rhs)?;
    Ok(tape.mean_all(sum)?)
}

fn nll_on_tape(
    tape: &mut Tape,
    indicators: &Tensor2,
    eta: Var,
) -> Result<Var, ModelError> {
    let ind = tape.input(indicators.clone());
    let sp = tape.softplus(eta)?;
    let linked = tape.mul(ind, eta)?;
    let per_row = tape.sub(sp, linked)?;
    Ok(tape.mean_all(per_row)?)
}

fn indicators(y: &[f64], ytildes: &[f64]) -> Tensor2 {
    Tensor2::raw(
        y.len(),
        1,
        y.iter()
            .zip(ytildes)
            .map(|(&yi, &yt)| if yi <= yt { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Hinged negative slope of a central difference: `sum relu(-(hi - lo)/(2eps))`.
fn hinge_slope_on_tape(
    tape: &mut Tape,
    hi: Var,
    lo: Var,
    eps: f64,
) -> Result<Var, ModelError> {
    let diff = tape.sub(hi, lo)?;
    let slope = tape.scale(diff, 1.0 / (2.0 * eps))?;
    let neg = tape.neg(slope)?;
    let hinge = tape.relu(neg)?;
    Ok(tape.sum_all(hinge)?)
}

/// Build one loss term on the tape. Fresh input nodes per call; parameters
/// come from `bound`, so gradients of different terms accumulate correctly
/// when summed on one tape.
pub fn term_on_tape(
    tape: &mut Tape,
    bound: &BoundModel<'_>,
    batch: &Batch,
    term: Term,
    probe_eps: f64,
) -> Result<Var, LossError> {
    batch.validate()?;
    check_probe(probe_eps)?;
    let x_in = tape.input(batch.x.clone());
    let y_col = Tensor2::from_column(&batch.y).map_err(ModelError::from)?;

    let var = match term {
        Term::Median => {
            let y = tape.input(y_col);
            let m = bound.median(tape, x_in)?;
            let r = tape.sub(y, m).map_err(ModelError::from)?;
            let a = tape.abs(r).map_err(ModelError::from)?;
            let half = tape.scale(a, 0.5).map_err(ModelError::from)?;
            tape.mean_all(half).map_err(ModelError::from)?
        }
        Term::PinballMc | Term::PinballAnchor => {
            let taus = if term == Term::PinballMc {
                &batch.taus
            } else {
                &batch.anchor_taus
            };
            let tau_col = Tensor2::from_column(taus).map_err(ModelError::from)?;
            let y = tape.input(y_col);
            let tau_in = tape.input(tau_col.clone());
            let q = bound.quantile(tape, x_in, tau_in)?;
            pinball_on_tape(tape, &tau_col, y, q)?
        }
        Term::CdfNllMc | Term::CdfNllAnchor => {
            let ytildes = if term == Term::CdfNllMc {
                &batch.ytildes
            } else {
                &batch.anchor_ytildes
            };
            let ind = indicators(&batch.y, ytildes);
            let yt_col = Tensor2::from_column(ytildes).map_err(ModelError::from)?;
            let yt = tape.input(yt_col);
            let eta = bound.cdf_eta(tape, x_in, yt)?;
            nll_on_tape(tape, &ind, eta)?
        }
        Term::GradQ => {
            let (hi, lo) = tau_probe_columns(&batch.taus, probe_eps)?;
            let hi_in = tape.input(hi);
            let lo_in = tape.input(lo);
            let q_hi = bound.quantile(tape, x_in, hi_in)?;
            let q_lo = bound.quantile(tape, x_in, lo_in)?;
            hinge_slope_on_tape(tape, q_hi, q_lo, probe_eps)?
        }
        Term::GradF => {
            let (hi, lo) = y_probe_columns(&batch.ytildes, probe_eps)?;
            let hi_in = tape.input(hi);
            let lo_in = tape.input(lo);
            let f_hi = bound.cdf_prob(tape, x_in, hi_in)?;
            let f_lo = bound.cdf_prob(tape, x_in, lo_in)?;
            hinge_slope_on_tape(tape, f_hi, f_lo, probe_eps)?
        }
        Term::RecoverQ => {
            let tau_col = Tensor2::from_column(&batch.taus).map_err(ModelError::from)?;
            let tau_in = tape.input(tau_col);
            let q = bound.quantile(tape, x_in, tau_in)?;
            let f_of_q = bound.cdf_prob(tape, x_in, q)?;
            let diff = tape.sub(tau_in, f_of_q).map_err(ModelError::from)?;
            let a = tape.abs(diff).map_err(ModelError::from)?;
            tape.mean_all(a).map_err(ModelError::from)?
        }
        Term::RecoverF => {
            let yt_col = Tensor2::from_column(&batch.ytildes).map_err(ModelError::from)?;
            let yt = tape.input(yt_col);
            let f = bound.cdf_prob(tape, x_in, yt)?;
            let q_of_f = bound.quantile(tape, x_in, f)?;
            let diff = tape.sub(yt, q_of_f).map_err(ModelError::from)?;
            let a = tape.abs(diff).map_err(ModelError::from)?;
            tape.mean_all(a).map_err(ModelError::from)?
        }
        Term::DualQ => {
            let (hi, lo) = tau_probe_columns(&batch.taus, probe_eps)?;
            let mut composed = Vec::with_capacity(2);
            for probes in [hi, lo] {
                let t = tape.input(probes);
                let q1 = bound.quantile(tape, x_in, t)?;
                let f1 = bound.cdf_prob(tape, x_in, q1)?;
                let q2 = bound.quantile(tape, x_in, f1)?;
                composed.push(q2);
            }
            hinge_slope_on_tape(tape, composed[0], composed[1], probe_eps)?
        }
        Term::DualF => {
            let (hi, lo) = y_probe_columns(&batch.ytildes, probe_eps)?;
            let mut composed = Vec::with_capacity(2);
            for probes in [hi, lo] {
                let yt = tape.input(probes);
                let f1 = bound.cdf_prob(tape, x_in, yt)?;
                let q1 = bound.quantile(tape, x_in, f1)?;
                let f2 = bound.cdf_prob(tape, x_in, q1)?;
                composed.push(f2);
            }
            hinge_slope_on_tape(tape, composed[0], composed[1], probe_eps)?
        }
    };
    Ok(var)
}

fn tau_probe_columns(taus: &[f64], eps: f64) -> Result<(Tensor2, Tensor2), LossError> {
    let hi: Vec<f64> = taus.iter().map(|&t| probe_center(t, eps) + eps).collect();
    let lo: Vec<f64> = taus.iter().map(|&t| probe_center(t, eps) - eps).collect();
    Ok((
        Tensor2::from_column(&hi).map_err(ModelError::from)?,
        Tensor2::from_column(&lo).map_err(ModelError::from)?,
    ))
}

fn y_probe_columns(ytildes: &[f64], eps: f64) -> Result<(Tensor2, Tensor2), LossError> {
    let hi: Vec<f64> = ytildes.iter().map(|&y| y + eps).collect();
    let lo: Vec<f64> = ytildes.iter().map(|&y| y - eps).collect();
    Ok((
        Tensor2::from_column(&hi).map_err(ModelError::from)?,
        Tensor2::from_column(&lo).map_err(ModelError::from)?,
    ))
}

/// Weighted sum of the active terms on one tape. Terms with weight zero are
/// not built at all; the sampler draws batch fields up front so skipping a
/// term never shifts the random stream.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundModel<'_>,
    batch: &Batch,
    weights: &LossTerms,
    probe_eps: f64,
) -> Result<(Var, Vec<(Term, Var)>), LossError> {
    batch.validate()?;
    check_probe(probe_eps)?;
    let mut parts = Vec::new();
    let mut total: Option<Var> = None;
    for term in Term::ALL {
        let w = weights.get(term);
        if w == 0.0 {
            continue;
        }
        let var = term_on_tape(tape, bound, batch, term, probe_eps)?;
        parts.push((term, var));
        let scaled = tape.scale(var, w).map_err(ModelError::from)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled).map_err(ModelError::from)?,
        });
    }
    let total = total.ok_or(LossError::NoActiveTerms)?;
    Ok((total, parts))
}

/// Read term values recorded by [`total_loss_on_tape`] back into a breakdown.
pub fn read_breakdown(
    tape: &Tape,
    total: Var,
    parts: &[(Term, Var)],
    weights: &LossTerms,
) -> Result<LossBreakdown, LossError> {
    let mut terms = LossTerms::default();
    for &(term, var) in parts {
        let v = tape
            .value(var)
            .map_err(ModelError::from)?
            .item()
            .map_err(ModelError::from)?;
        terms.set(term, v);
    }
    let total = tape
        .value(total)
        .map_err(ModelError::from)?
        .item()
        .map_err(ModelError::from)?;
    Ok(LossBreakdown {
        terms,
        weights: *weights,
        total,
    })
}

/// Full breakdown without gradients; the evaluation entry point.
pub fn total_loss(
    model: &DdrModel,
    batch: &Batch,
    weights: &LossTerms,
    probe_eps: f64,
) -> Result<LossBreakdown, LossError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let (total, parts) = total_loss_on_tape(&mut tape, &bound, batch, weights, probe_eps)?;
    read_breakdown(&tape, total, &parts, weights)
}

/// Mean pinball loss of a quantile surface under per-row percentiles.
pub fn pinball_mc<Q: QuantilePredictor>(
    q: &Q,
    taus: &[f64],
    x: &Tensor2,
    y: &[f64],
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if taus.len() != x.rows() || y.len() != x.rows() {
        return Err(LossError::BatchLength {
            field: "taus/y",
            expected: x.rows(),
            got: taus.len().min(y.len()),
        });
    }
    let preds = q.quantile_rows(taus, x)?;
    let total: f64 = taus
        .iter()
        .zip(y.iter().zip(&preds))
        .map(|(&t, (&yi, &qi))| pinball(t, yi, qi))
        .sum();
    Ok(total / x.rows() as f64)
}

/// Mean CDF negative log-likelihood under per-row evaluation values,
/// computed from head probabilities.
pub fn cdf_nll_mc<F: CdfPredictor>(
    f: &F,
    ytildes: &[f64],
    x: &Tensor2,
    y: &[f64],
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if ytildes.len() != x.rows() || y.len() != x.rows() {
        return Err(LossError::BatchLength {
            field: "ytildes/y",
            expected: x.rows(),
            got: ytildes.len().min(y.len()),
        });
    }
    let probs = f.cdf_rows(ytildes, x)?;
    let total: f64 = probs
        .iter()
        .zip(y.iter().zip(ytildes))
        .map(|(&p, (&yi, &yt))| {
            if yi <= yt {
                -p.ln()
            } else {
                -(-p).ln_1p()
            }
        })
        .sum();
    Ok(total / x.rows() as f64)
}

/// Monotonicity penalty of a quantile surface at one percentile:
/// `sum_i relu(-(Q(tau+eps) - Q(tau-eps)) / (2 eps))`.
pub fn grad_penalty_q<Q: QuantilePredictor>(
    q: &Q,
    tau: f64,
    x: &Tensor2,
    eps: f64,
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_probe(eps)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LossError::TauOutOfRange(tau));
    }
    let c = probe_center(tau, eps);
    let hi = q.quantile_batch(c + eps, x)?;
    let lo = q.quantile_batch(c - eps, x)?;
    Ok(hinge_sum(&hi, &lo, eps))
}

/// Monotonicity penalty of a CDF surface at one value.
pub fn grad_penalty_f<F: CdfPredictor>(
    f: &F,
    ytilde: f64,
    x: &Tensor2,
    eps: f64,
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_probe(eps)?;
    let hi = f.cdf_batch(ytilde + eps, x)?;
    let lo = f.cdf_batch(ytilde - eps, x)?;
    Ok(hinge_sum(&hi, &lo, eps))
}

fn hinge_sum(hi: &[f64], lo: &[f64], eps: f64) -> f64 {
    hi.iter()
        .zip(lo)
        .map(|(&h, &l)| (-(h - l) / (2.0 * eps)).max(0.0))
        .sum()
}

/// Mean percentile recovery error `|tau - F(Q(tau, x), x)|`.
pub fn recover_q<Q: QuantilePredictor, F: CdfPredictor>(
    q: &Q,
    f: &F,
    taus: &[f64],
    x: &Tensor2,
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if taus.len() != x.rows() {
        return Err(LossError::BatchLength {
            field: "taus",
            expected: x.rows(),
            got: taus.len(),
        });
    }
    let q_vals = q.quantile_rows(taus, x)?;
    let f_of_q = f.cdf_rows(&q_vals, x)?;
    let total: f64 = taus
        .iter()
        .zip(&f_of_q)
        .map(|(&t, &p)| (t - p).abs())
        .sum();
    Ok(total / x.rows() as f64)
}

/// Mean value recovery error `|ytilde - Q(F(ytilde, x), x)|`.
pub fn recover_f<Q: QuantilePredictor, F: CdfPredictor>(
    q: &Q,
    f: &F,
    ytildes: &[f64],
    x: &Tensor2,
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if ytildes.len() != x.rows() {
        return Err(LossError::BatchLength {
            field: "ytildes",
            expected: x.rows(),
            got: ytildes.len(),
        });
    }
    let f_vals = f.cdf_rows(ytildes, x)?;
    let q_of_f = q.quantile_rows(&f_vals, x)?;
    let total: f64 = ytildes
        .iter()
        .zip(&q_of_f)
        .map(|(&yt, &qv)| (yt - qv).abs())
        .sum();
    Ok(total / x.rows() as f64)
}

/// Duality hinge on the composed map `Q(F(Q(tau, x), x), x)` at one percentile.
pub fn dual_q<Q: QuantilePredictor, F: CdfPredictor>(
    q: &Q,
    f: &F,
    tau: f64,
    x: &Tensor2,
    eps: f64,
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_probe(eps)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LossError::TauOutOfRange(tau));
    }
    let c = probe_center(tau, eps);
    let compose = |t: f64| -> Result<Vec<f64>, LossError> {
        let q1 = q.quantile_batch(t, x)?;
        let f1 = f.cdf_rows(&q1, x)?;
        Ok(q.quantile_rows(&f1, x)?)
    };
    let hi = compose(c + eps)?;
    let lo = compose(c - eps)?;
    Ok(hinge_sum(&hi, &lo, eps))
}

/// Duality hinge on the composed map `F(Q(F(y, x), x), x)` at one value.
pub fn dual_f<Q: QuantilePredictor, F: CdfPredictor>(
    q: &Q,
    f: &F,
    ytilde: f64,
    x: &Tensor2,
    eps: f64,
) -> Result<f64, LossError> {
    if x.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_probe(eps)?;
    let compose = |yt: f64| -> Result<Vec<f64>, LossError> {
        let f1 = f.cdf_batch(yt, x)?;
        let q1 = q.quantile_rows(&f1, x)?;
        Ok(f.cdf_rows(&q1, x)?)
    };
    let hi = compose(ytilde + eps)?;
    let lo = compose(ytilde - eps)?;
    Ok(hinge_sum(&hi, &lo, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchSpec, FnCdf, FnQuantile, InjectionMode, Standardization, StdSpace};
    use crate::autodiff::tensor::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> DdrModel {
        let arch = ArchSpec {
            input_dim: 2,
            feature_widths: vec![6, 4],
            regression_widths: vec![5],
            injection: InjectionMode::Linear,
            output_dim: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        DdrModel::init(arch, Standardization::identity(2), &mut rng).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor2::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let taus = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let ytildes = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let anchor_taus = (0..n).map(|_| 0.1 * rng.random_range(1..10) as f64).collect();
        let anchor_ytildes = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        Batch {
            x,
            y,
            taus,
            ytildes,
            anchor_taus,
            anchor_ytildes,
        }
    }

    #[test]
    fn pinball_at_half_is_half_abs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let y = rng.random_range(-5.0..5.0);
            let y_hat = rng.random_range(-5.0..5.0);
            assert_eq!(pinball(0.5, y, y_hat), 0.5 * (y - y_hat).abs());
        }
        assert_eq!(pinball(0.3, 2.0, 2.0), 0.0);
    }

    #[test]
    fn pinball_grid_minimizer_sits_at_the_sample_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sorted = sample.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for tau in [0.1, 0.25, 0.5, 0.8, 0.9] {
            let step = 1e-3;
            let mut best = (f64::INFINITY, f64::NAN);
            let mut v = -1.0;
            while v <= 1.0 {
                let loss: f64 = sample.iter().map(|&y| pinball(tau, y, v)).sum();
                if loss < best.0 - 1e-12 {
                    best = (loss, v);
                }
                v += step;
            }
            // left edge of the flat optimum: the order statistic at ceil(n tau)
            let k = ((sample.len() as f64 * tau).ceil() as usize).max(1) - 1;
            assert!(
                (best.1 - sorted[k]).abs() <= 1.5 * step,
                "tau {tau}: argmin {} vs order stat {}",
                best.1,
                sorted[k]
            );
        }
    }

    #[test]
    fn cdf_nll_matches_naive_form_and_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let eta: f64 = rng.random_range(-30.0..30.0);
            let le = rng.random_bool(0.5);
            let naive = -(if le { eta } else { 0.0 }) + (1.0 + eta.exp()).ln();
            assert!((cdf_nll(le, eta) - naive).abs() < 1e-12, "eta {eta}");
        }
        assert!(cdf_nll(true, 500.0).is_finite());
        assert!(cdf_nll(false, 500.0).is_finite());
        assert!(cdf_nll(true, -500.0).is_finite());
        // correct indicator at saturation costs nothing
        assert!(cdf_nll(true, 500.0).abs() < 1e-12);
        assert!(cdf_nll(false, -500.0).abs() < 1e-12);
    }

    #[test]
    fn tape_and_plain_flavors_agree() {
        let model = model();
        let b = batch(16, 5);
        let q = StdSpace(&model);
        let f = StdSpace(&model);

        let eval = |term: Term| -> f64 {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let var = term_on_tape(&mut tape, &bound, &b, term, PROBE_EPS).unwrap();
            tape.value(var).unwrap().item().unwrap()
        };

        let plain_pinball = pinball_mc(&q, &b.taus, &b.x, &b.y).unwrap();
        assert!((eval(Term::PinballMc) - plain_pinball).abs() < 1e-12);

        let plain_anchor = pinball_mc(&q, &b.anchor_taus, &b.x, &b.y).unwrap();
        assert!((eval(Term::PinballAnchor) - plain_anchor).abs() < 1e-12);

        let plain_nll = cdf_nll_mc(&f, &b.ytildes, &b.x, &b.y).unwrap();
        assert!((eval(Term::CdfNllMc) - plain_nll).abs() < 1e-9);

        let plain_rq = recover_q(&q, &f, &b.taus, &b.x).unwrap();
        assert!((eval(Term::RecoverQ) - plain_rq).abs() < 1e-12);

        let plain_rf = recover_f(&q, &f, &b.ytildes, &b.x).unwrap();
        assert!((eval(Term::RecoverF) - plain_rf).abs() < 1e-12);

        // per-percentile penalties: compare on a batch that repeats one tau
        let tau = 0.37;
        let one_tau = Batch {
            taus: vec![tau; 16],
            ytildes: vec![0.21; 16],
            ..b.clone()
        };
        let eval_one = |term: Term| -> f64 {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let var = term_on_tape(&mut tape, &bound, &one_tau, term, PROBE_EPS).unwrap();
            tape.value(var).unwrap().item().unwrap()
        };
        let plain_gq = grad_penalty_q(&q, tau, &b.x, PROBE_EPS).unwrap();
        assert!((eval_one(Term::GradQ) - plain_gq).abs() < 1e-10);
        let plain_gf = grad_penalty_f(&f, 0.21, &b.x, PROBE_EPS).unwrap();
        assert!((eval_one(Term::GradF) - plain_gf).abs() < 1e-10);
        let plain_dq = dual_q(&q, &f, tau, &b.x, PROBE_EPS).unwrap();
        assert!((eval_one(Term::DualQ) - plain_dq).abs() < 1e-10);
        let plain_df = dual_f(&q, &f, 0.21, &b.x, PROBE_EPS).unwrap();
        assert!((eval_one(Term::DualF) - plain_df).abs() < 1e-10);
    }

    #[test]
    fn breakdown_total_is_the_weighted_sum() {
        let model = model();
        let b = batch(8, 9);
        let weights = LossTerms {
            median: 1.0,
            pinball_mc: 0.7,
            pinball_anchor: 0.3,
            cdf_nll_mc: 0.5,
            cdf_nll_anchor: 0.25,
            grad_q: 0.4,
            grad_f: 0.4,
            recover_q: 0.9,
            recover_f: 0.9,
            dual_q: 0.1,
            dual_f: 0.1,
        };
        let bd = total_loss(&model, &b, &weights, PROBE_EPS).unwrap();
        assert!((bd.total - bd.terms.weighted_total(&weights)).abs() < 1e-12);
        assert!(bd.terms.median > 0.0);
    }

    #[test]
    fn zero_weight_terms_are_not_built() {
        let model = model();
        let b = batch(8, 13);
        let weights = LossTerms {
            median: 1.0,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let (_, parts) = total_loss_on_tape(&mut tape, &bound, &b, &weights, PROBE_EPS).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].0, Term::Median);

        let none = LossTerms::default();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        assert!(matches!(
            total_loss_on_tape(&mut tape, &bound, &b, &none, PROBE_EPS),
            Err(LossError::NoActiveTerms)
        ));
    }

    #[test]
    fn penalties_vanish_on_monotone_surfaces_and_fire_on_reversed_ones() {
        let x = Tensor2::from_fn(5, 1, |r, _| r as f64 / 5.0).unwrap();
        let rising = FnQuantile(|tau: f64, _: &[f64]| 2.0 * tau);
        assert_eq!(grad_penalty_q(&rising, 0.4, &x, 1e-2).unwrap(), 0.0);
        let falling = FnQuantile(|tau: f64, _: &[f64]| -3.0 * tau);
        let pen = grad_penalty_q(&falling, 0.4, &x, 1e-2).unwrap();
        // hinge of slope -3 summed over 5 rows
        assert!((pen - 15.0).abs() < 1e-9);

        let cdf_up = FnCdf {
            f: |y: f64, _: &[f64]| sigmoid(y),
            y_range: (-3.0, 3.0),
        };
        assert_eq!(grad_penalty_f(&cdf_up, 0.0, &x, 1e-2).unwrap(), 0.0);

        // exact inverses compose to the identity: slope one, no duality hinge
        let q_exact = FnQuantile(|tau: f64, _: &[f64]| (tau / (1.0 - tau)).ln());
        let f_exact = FnCdf {
            f: |y: f64, _: &[f64]| sigmoid(y),
            y_range: (-3.0, 3.0),
        };
        assert!(dual_q(&q_exact, &f_exact, 0.3, &x, 1e-3).unwrap() < 1e-9);
        assert!(dual_f(&q_exact, &f_exact, 0.5, &x, 1e-3).unwrap() < 1e-9);
    }

    #[test]
    fn gradients_of_every_term_match_finite_differences() {
        let model = model();
        let b = batch(6, 21);
        let h = 1e-6;
        for term in Term::ALL {
            let value_at = |m: &DdrModel| -> f64 {
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape).unwrap();
                let var = term_on_tape(&mut tape, &bound, &b, term, PROBE_EPS).unwrap();
                tape.value(var).unwrap().item().unwrap()
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let var = term_on_tape(&mut tape, &bound, &b, term, PROBE_EPS).unwrap();
            let grads = tape.backward(var).unwrap();

            // spot-check a few entries of every parameter
            for (name, tensor) in model.params.iter() {
                let zeros = Tensor2::zeros(tensor.rows(), tensor.cols());
                let g = grads.get(name).unwrap_or(&zeros);
                for (r, c) in [(0, 0), (tensor.rows() - 1, tensor.cols() - 1)] {
                    let base = tensor.get(r, c).unwrap();
                    let mut plus = model.clone();
                    plus.params.get_mut(name).unwrap().set(r, c, base + h).unwrap();
                    let mut minus = model.clone();
                    minus.params.get_mut(name).unwrap().set(r, c, base - h).unwrap();
                    let fd = (value_at(&plus) - value_at(&minus)) / (2.0 * h);
                    let a = g.get(r, c).unwrap();
                    assert!(
                        (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-3),
                        "{} {name}[{r},{c}]: analytic {a} vs fd {fd}",
                        term.name()
                    );
                }
            }
        }
    }

    #[test]
    fn empty_and_ragged_batches_error() {
        let model = model();
        let empty = Batch {
            x: Tensor2::zeros(0, 2),
            y: vec![],
            taus: vec![],
            ytildes: vec![],
            anchor_taus: vec![],
            anchor_ytildes: vec![],
        };
        let weights = LossTerms {
            median: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            total_loss(&model, &empty, &weights, PROBE_EPS),
            Err(LossError::EmptyBatch)
        ));

        let mut ragged = batch(4, 1);
        ragged.taus.pop();
        assert!(matches!(
            total_loss(&model, &ragged, &weights, PROBE_EPS),
            Err(LossError::BatchLength { field: "taus", .. })
        ));

        let q = StdSpace(&model);
        assert!(matches!(
            pinball_mc(&q, &[], &Tensor2::zeros(0, 2), &[]),
            Err(LossError::EmptyBatch)
        ));
        assert!(matches!(
            grad_penalty_q(&q, 0.5, &batch(4, 2).x, 0.0),
            Err(LossError::BadProbeStep(_))
        ));
        assert!(matches!(
            grad_penalty_q(&q, 1.2, &batch(4, 2).x, 1e-2),
            Err(LossError::TauOutOfRange(_))
        ));
    }
}
