//! Loading trained models of any kind and presenting them as prediction
//! surfaces in original data units.

use std::path::Path;

use ddr_core::inference::{dual_predict_quantile, invert_f_rows, InferenceError};
use ddr_core::network::{
    peek_kind, DdrModel, FcnnEnsemble, FcnnModel, ModelError, OrigSpace, QuantilePredictor,
};
use ddr_core::Tensor2;

use crate::table::suffixed;
use crate::CliError;

/// Suffixes of the nine per-percentile files written by `train --mode fcnn`.
pub const DECILE_SUFFIXES: [&str; 9] =
    ["q10", "q20", "q30", "q40", "q50", "q60", "q70", "q80", "q90"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Q head evaluated directly.
    Direct,
    /// Blend of the Q head and the bisected inverse of the F head.
    Dual,
}

pub fn parse_infer_mode(s: &str) -> Result<InferMode, String> {
    match s {
        "direct" => Ok(InferMode::Direct),
        "dual" => Ok(InferMode::Dual),
        other => Err(format!("unknown inference mode `{other}` (expected direct or dual)")),
    }
}

pub enum ModelHandle {
    Ddr(Box<DdrModel>),
    Fcnn(FcnnEnsemble),
}

impl ModelHandle {
    /// Load whatever lives at `path`. A missing file falls back to the
    /// per-percentile family `path.q10` .. `path.q90`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if path.exists() {
            return match peek_kind(path)?.as_str() {
                "ddr" => Ok(ModelHandle::Ddr(Box::new(DdrModel::load(path)?))),
                _ => {
                    let (model, _) = FcnnModel::load(path)?;
                    Ok(ModelHandle::Fcnn(FcnnEnsemble::new(vec![model])?))
                }
            };
        }
        let family: Vec<_> = DECILE_SUFFIXES.iter().map(|s| suffixed(path, s)).collect();
        if !family[0].exists() {
            return Err(CliError::msg(format!(
                "no model at {} (nor a {} family)",
                path.display(),
                family[0].display()
            )));
        }
        let mut models = Vec::with_capacity(9);
        for p in &family {
            let (model, _) = FcnnModel::load(p)?;
            models.push(model);
        }
        Ok(ModelHandle::Fcnn(FcnnEnsemble::new(models)?))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelHandle::Ddr(m) => m.arch.input_dim,
            ModelHandle::Fcnn(e) => e.models[0].arch.input_dim,
        }
    }

    /// The percentiles a fixed-percentile model can answer, ascending.
    pub fn fixed_taus(&self) -> Option<Vec<f64>> {
        match self {
            ModelHandle::Ddr(_) => None,
            ModelHandle::Fcnn(e) => {
                let mut taus = e.taus();
                taus.sort_by(f64::total_cmp);
                Some(taus)
            }
        }
    }

    /// The DDR model behind this handle, or an error naming what `what`
    /// needed it for.
    pub fn require_ddr(&self, what: &str) -> Result<&DdrModel, CliError> {
        match self {
            ModelHandle::Ddr(m) => Ok(m),
            ModelHandle::Fcnn(_) => Err(CliError::msg(format!(
                "{what} requires a ddr model; this is a fixed-percentile baseline"
            ))),
        }
    }

    /// The F head in original units, or an error naming what needed it.
    pub fn require_f(&self, what: &str) -> Result<OrigSpace<'_>, CliError> {
        let m = self.require_ddr(what)?;
        if !m.trained_heads.f {
            return Err(CliError::msg(format!(
                "{what} requires a trained F head; this model was trained without one \
                 (mode ddr-q or a percentile baseline)"
            )));
        }
        Ok(OrigSpace(m))
    }
}

/// Blended Q-direct / F-inverted quantile surface in original units. The
/// blend weight and bisection tolerance are fixed at construction so the
/// surface can stand in wherever a plain predictor is expected.
pub struct DualSpace<'a> {
    model: &'a DdrModel,
    alpha: f64,
    tol: f64,
}

impl<'a> DualSpace<'a> {
    pub fn new(model: &'a DdrModel, alpha: f64, tol: f64) -> Result<Self, CliError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CliError::Inference(InferenceError::BadAlpha(alpha)));
        }
        if !(tol > 0.0) {
            return Err(CliError::Inference(InferenceError::BadTolerance(tol)));
        }
        if !model.trained_heads.f {
            return Err(CliError::msg(
                "dual inference requires a trained F head; this model was trained without one",
            ));
        }
        Ok(Self { model, alpha, tol })
    }

    fn demote(e: InferenceError) -> ModelError {
        match e {
            InferenceError::Model(m) => m,
            InferenceError::TauOutOfRange(t) => ModelError::TauOutOfRange(t),
            // alpha and tol were validated in new(); the mean grid is not
            // involved in quantile evaluation
            other => unreachable!("dual surface: {other}"),
        }
    }
}

impl QuantilePredictor for DualSpace<'_> {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        let space = OrigSpace(self.model);
        dual_predict_quantile(&space, &space, tau, x, self.alpha, self.tol)
            .map_err(Self::demote)
    }

    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        let space = OrigSpace(self.model);
        if self.alpha == 1.0 {
            return space.quantile_rows(taus, x);
        }
        let inverted = invert_f_rows(&space, taus, x, self.tol).map_err(Self::demote)?;
        if self.alpha == 0.0 {
            return Ok(inverted.values);
        }
        let direct = space.quantile_rows(taus, x)?;
        Ok(direct
            .iter()
            .zip(&inverted.values)
            .map(|(&d, &v)| self.alpha * d + (1.0 - self.alpha) * v)
            .collect())
    }
}

/// Object-safe shim so boxed surfaces can feed the generic inference entry
/// points.
pub struct DynQ<'a>(pub &'a dyn QuantilePredictor);

impl QuantilePredictor for DynQ<'_> {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.quantile_batch(tau, x)
    }

    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.quantile_rows(taus, x)
    }
}
