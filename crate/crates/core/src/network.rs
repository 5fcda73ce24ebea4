//! Model definition: shared backbone, percentile / value injection, heads.
//!
//! The backbone is a stack of GLU feature layers followed by ReLU regression
//! layers and a linear output. The quantile head injects a centered percentile
//! `2*tau - 1` into every feature layer, the CDF head injects a standardized
//! target value, and the median head runs the backbone with no injection.
//! All heads share every backbone weight.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::tape::{AdError, Tape, Var};
use crate::autodiff::tensor::{sigmoid, Tensor2, TensorError};

/// Percentiles this close to 0 or 1 are clipped before entering the network.
pub const TAU_EPS: f64 = 1e-4;

/// Largest probability the CDF head reports; keeps outputs strictly inside
/// (0, 1) even when the log-odds saturate.
pub const PROB_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("input has {got} columns, model expects {expected}")]
    WrongInputDim { expected: usize, got: usize },
    #[error("tau {0} is outside (0, 1)")]
    TauOutOfRange(f64),
    #[error("non-finite scalar input {0}")]
    NonFiniteScalar(f64),
    #[error("row count mismatch: {left} scalars for {right} rows")]
    RowCountMismatch { left: usize, right: usize },
    #[error("model does not predict tau {0}; fixed percentiles only")]
    UnsupportedTau(f64),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format version {got}, this build reads {expected}")]
    UnsupportedVersion { got: u32, expected: u32 },
    #[error("model kind is {got:?}, expected {expected:?}")]
    WrongKind { expected: String, got: String },
    #[error("incompatible parameters: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    /// Affine map of the injected scalar, one per feature layer.
    Linear,
    /// Scalar lifted through a small GLU block before the affine map.
    MlpProjection,
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InjectionMode::Linear => "linear",
            InjectionMode::MlpProjection => "mlp-projection",
        })
    }
}

impl FromStr for InjectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(InjectionMode::Linear),
            "mlp-projection" => Ok(InjectionMode::MlpProjection),
            other => Err(format!(
                "unknown injection mode {other:?}, expected linear or mlp-projection"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    /// Gated output width of each GLU feature layer; the linear sublayer is
    /// twice as wide.
    pub feature_widths: Vec<usize>,
    pub regression_widths: Vec<usize>,
    pub injection: InjectionMode,
    pub output_dim: usize,
}

impl ArchSpec {
    /// Two GLU feature layers of width 256 and one ReLU regression layer.
    pub fn default_ddr(input_dim: usize) -> Self {
        Self {
            input_dim,
            feature_widths: vec![256, 256],
            regression_widths: vec![256],
            injection: InjectionMode::Linear,
            output_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::BadArch("input_dim must be positive".into()));
        }
        if self.output_dim == 0 {
            return Err(ModelError::BadArch("output_dim must be positive".into()));
        }
        if self.feature_widths.is_empty() {
            return Err(ModelError::BadArch(
                "at least one feature layer is required".into(),
            ));
        }
        if self.feature_widths.iter().any(|&w| w == 0)
            || self.regression_widths.iter().any(|&w| w == 0)
        {
            return Err(ModelError::BadArch("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Column-wise standardization of features and target, fit on the training
/// split only. `y_min_std` / `y_max_std` bound the standardized target on the
/// training split and delimit value sampling and CDF inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub y_min_std: f64,
    pub y_max_std: f64,
}

impl Standardization {
    /// No-op transform with target bounds at +-1; tests override fields.
    pub fn identity(dim: usize) -> Self {
        Self {
            x_mean: vec![0.0; dim],
            x_std: vec![1.0; dim],
            y_mean: 0.0,
            y_std: 1.0,
            y_min_std: -1.0,
            y_max_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.x_mean.len() != self.x_std.len() {
            return Err(ModelError::BadArch("x_mean/x_std length mismatch".into()));
        }
        if self.x_std.iter().any(|&s| !(s > 0.0)) || !(self.y_std > 0.0) {
            return Err(ModelError::BadArch("standard deviations must be positive".into()));
        }
        if !(self.y_min_std < self.y_max_std) {
            return Err(ModelError::BadArch("target bounds must satisfy min < max".into()));
        }
        Ok(())
    }

    pub fn apply_x(&self, x: &Tensor2) -> Result<Tensor2, ModelError> {
        if x.cols() != self.x_mean.len() {
            return Err(ModelError::WrongInputDim {
                expected: self.x_mean.len(),
                got: x.cols(),
            });
        }
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.x_mean[i % cols]) / self.x_std[i % cols])
            .collect();
        Ok(Tensor2::new(x.rows(), cols, data)?)
    }

    pub fn apply_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn invert_y(&self, y_std: f64) -> f64 {
        y_std * self.y_std + self.y_mean
    }
}

/// Ordered, named parameter tensors. Order is the single source of truth for
/// serialization and optimizer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    items: Vec<(String, Tensor2)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            items: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor2) -> Result<(), ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::BadArch(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.to_string(), self.items.len());
        self.items.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.index.get(name).map(|&i| &self.items[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        let i = *self.index.get(name)?;
        Some(&mut self.items[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor2)> {
        self.items.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.items.iter().map(|(_, t)| t.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainedHeads {
    pub q: bool,
    pub f: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Inject {
    Tau,
    Y,
}

impl Inject {
    fn tag(self) -> &'static str {
        match self {
            Inject::Tau => "tau",
            Inject::Y => "y",
        }
    }
}

/// Expected parameter names and shapes for an architecture. `injected` adds
/// the per-feature-layer injection parameters for both heads.
fn expected_params(arch: &ArchSpec, injected: bool) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut fan_in = arch.input_dim;
    for (i, &h) in arch.feature_widths.iter().enumerate() {
        let wide = 2 * h;
        out.push((format!("feat{i}.w"), fan_in, wide));
        out.push((format!("feat{i}.b"), 1, wide));
        if injected {
            for tag in ["tau", "y"] {
                match arch.injection {
                    InjectionMode::Linear => {
                        out.push((format!("feat{i}.{tag}.w"), 1, wide));
                        out.push((format!("feat{i}.{tag}.b"), 1, wide));
                    }
                    InjectionMode::MlpProjection => {
                        out.push((format!("feat{i}.{tag}.p1w"), 1, wide));
                        out.push((format!("feat{i}.{tag}.p1b"), 1, wide));
                        out.push((format!("feat{i}.{tag}.p2w"), h, wide));
                        out.push((format!("feat{i}.{tag}.p2b"), 1, wide));
                    }
                }
            }
        }
        fan_in = h;
    }
    for (j, &w) in arch.regression_widths.iter().enumerate() {
        out.push((format!("reg{j}.w"), fan_in, w));
        out.push((format!("reg{j}.b"), 1, w));
        fan_in = w;
    }
    out.push(("out.w".to_string(), fan_in, arch.output_dim));
    out.push(("out.b".to_string(), 1, arch.output_dim));
    out
}

fn glorot_params(
    arch: &ArchSpec,
    injected: bool,
    rng: &mut impl Rng,
) -> Result<ParamSet, ModelError> {
    let mut params = ParamSet::new();
    for (name, rows, cols) in expected_params(arch, injected) {
        // weights end in `w`, biases in `b`; biases start at zero
        let tensor = if name.ends_with('b') {
            Tensor2::zeros(rows, cols)
        } else {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))?
        };
        params.insert(&name, tensor)?;
    }
    Ok(params)
}

/// Quantile / CDF / median model over standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DdrModel {
    pub arch: ArchSpec,
    pub stats: Standardization,
    pub params: ParamSet,
    pub trained_heads: TrainedHeads,
}

impl DdrModel {
    pub fn init(
        arch: ArchSpec,
        stats: Standardization,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        stats.validate()?;
        if arch.output_dim != 1 {
            return Err(ModelError::BadArch(
                "quantile/CDF heads are scalar; output_dim must be 1".into(),
            ));
        }
        let params = glorot_params(&arch, true, rng)?;
        Ok(Self {
            arch,
            stats,
            params,
            trained_heads: TrainedHeads::default(),
        })
    }

    /// Register every parameter on `tape` and return a handle for building
    /// head subgraphs.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Result<BoundModel<'m>, ModelError> {
        let mut vars = HashMap::new();
        for (name, tensor) in self.params.iter() {
            vars.insert(name.to_string(), tape.param(name, tensor.clone())?);
        }
        Ok(BoundModel { model: self, vars })
    }

    fn check_x(&self, x: &Tensor2) -> Result<(), ModelError> {
        if x.cols() != self.arch.input_dim {
            return Err(ModelError::WrongInputDim {
                expected: self.arch.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Median head on standardized inputs.
    pub fn median_forward(&self, x_std: &Tensor2) -> Result<Tensor2, ModelError> {
        self.check_x(x_std)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.input(x_std.clone());
        let out = bound.median(&mut tape, x)?;
        Ok(tape.value(out)?.clone())
    }

    /// Quantile head at a single percentile, standardized output units.
    pub fn q_forward(&self, tau: f64, x_std: &Tensor2) -> Result<Tensor2, ModelError> {
        self.q_forward_rows(&vec![tau; x_std.rows()], x_std)
    }

    /// Quantile head with one percentile per input row.
    pub fn q_forward_rows(&self, taus: &[f64], x_std: &Tensor2) -> Result<Tensor2, ModelError> {
        self.check_x(x_std)?;
        if taus.len() != x_std.rows() {
            return Err(ModelError::RowCountMismatch {
                left: taus.len(),
                right: x_std.rows(),
            });
        }
        let clipped = clip_taus(taus)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.input(x_std.clone());
        let tau_col = tape.input(Tensor2::from_column(&clipped)?);
        let out = bound.quantile(&mut tape, x, tau_col)?;
        Ok(tape.value(out)?.clone())
    }

    /// CDF head at a single standardized value: log-odds and clamped
    /// probabilities, one row each per input row.
    pub fn f_forward(&self, y_std: f64, x_std: &Tensor2) -> Result<(Tensor2, Tensor2), ModelError> {
        self.f_forward_rows(&vec![y_std; x_std.rows()], x_std)
    }

    pub fn f_forward_rows(
        &self,
        ys_std: &[f64],
        x_std: &Tensor2,
    ) -> Result<(Tensor2, Tensor2), ModelError> {
        self.check_x(x_std)?;
        if ys_std.len() != x_std.rows() {
            return Err(ModelError::RowCountMismatch {
                left: ys_std.len(),
                right: x_std.rows(),
            });
        }
        for &y in ys_std {
            if !y.is_finite() {
                return Err(ModelError::NonFiniteScalar(y));
            }
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.input(x_std.clone());
        let y_col = tape.input(Tensor2::from_column(ys_std)?);
        let eta = bound.cdf_eta(&mut tape, x, y_col)?;
        let eta = tape.value(eta)?.clone();
        let prob = eta.map(|e| sigmoid(e).clamp(f64::MIN_POSITIVE, PROB_CEIL));
        Ok((eta, prob))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        ModelFile::from_ddr(self).write(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        ModelFile::read(path)?.into_ddr()
    }
}

/// Validate taus into the open interval and clip to the working range.
fn clip_taus(taus: &[f64]) -> Result<Vec<f64>, ModelError> {
    taus.iter()
        .map(|&t| {
            if !t.is_finite() || t <= 0.0 || t >= 1.0 {
                Err(ModelError::TauOutOfRange(t))
            } else {
                Ok(t.clamp(TAU_EPS, 1.0 - TAU_EPS))
            }
        })
        .collect()
}

/// Tape-bound view of a [`DdrModel`]; builds head subgraphs that share the
/// registered parameters.
pub struct BoundModel<'m> {
    model: &'m DdrModel,
    vars: HashMap<String, Var>,
}

impl BoundModel<'_> {
    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from bound model"))
    }

    pub fn median(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        self.backbone(tape, x, None)
    }

    /// Quantile head; `tau` is a column of raw percentiles in (0, 1), centered
    /// in-graph so composed heads keep gradient flow through the centering.
    pub fn quantile(&self, tape: &mut Tape, x: Var, tau: Var) -> Result<Var, ModelError> {
        let doubled = tape.scale(tau, 2.0)?;
        let centered = tape.add_scalar(doubled, -1.0)?;
        self.backbone(tape, x, Some((centered, Inject::Tau)))
    }

    /// CDF head log-odds; `y` is a column of standardized target values.
    pub fn cdf_eta(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, ModelError> {
        self.backbone(tape, x, Some((y, Inject::Y)))
    }

    /// CDF head probability.
    pub fn cdf_prob(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var, ModelError> {
        let eta = self.cdf_eta(tape, x, y)?;
        Ok(tape.sigmoid(eta)?)
    }

    fn backbone(
        &self,
        tape: &mut Tape,
        x: Var,
        inject: Option<(Var, Inject)>,
    ) -> Result<Var, ModelError> {
        let arch = &self.model.arch;
        let mut h = x;
        for i in 0..arch.feature_widths.len() {
            let pre = tape.matmul(h, self.var(&format!("feat{i}.w")))?;
            let mut pre = tape.broadcast_add_row(pre, self.var(&format!("feat{i}.b")))?;
            if let Some((scalar, kind)) = inject {
                let contribution = self.injection(tape, scalar, i, kind)?;
                pre = tape.add(pre, contribution)?;
            }
            h = tape.glu(pre)?;
        }
        for j in 0..arch.regression_widths.len() {
            let pre = tape.matmul(h, self.var(&format!("reg{j}.w")))?;
            let pre = tape.broadcast_add_row(pre, self.var(&format!("reg{j}.b")))?;
            h = tape.relu(pre)?;
        }
        let out = tape.matmul(h, self.var("out.w"))?;
        Ok(tape.broadcast_add_row(out, self.var("out.b"))?)
    }

    fn injection(
        &self,
        tape: &mut Tape,
        scalar: Var,
        layer: usize,
        kind: Inject,
    ) -> Result<Var, ModelError> {
        let tag = kind.tag();
        match self.model.arch.injection {
            InjectionMode::Linear => {
                let lifted = tape.matmul(scalar, self.var(&format!("feat{layer}.{tag}.w")))?;
                Ok(tape.broadcast_add_row(lifted, self.var(&format!("feat{layer}.{tag}.b")))?)
            }
            InjectionMode::MlpProjection => {
                let lifted = tape.matmul(scalar, self.var(&format!("feat{layer}.{tag}.p1w")))?;
                let lifted =
                    tape.broadcast_add_row(lifted, self.var(&format!("feat{layer}.{tag}.p1b")))?;
                let gated = tape.glu(lifted)?;
                let up = tape.matmul(gated, self.var(&format!("feat{layer}.{tag}.p2w")))?;
                Ok(tape.broadcast_add_row(up, self.var(&format!("feat{layer}.{tag}.p2b")))?)
            }
        }
    }
}

/// Plain feed-forward quantile net: the same backbone without injection, one
/// output column per fixed percentile.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnnModel {
    pub arch: ArchSpec,
    pub stats: Standardization,
    pub params: ParamSet,
    pub taus: Vec<f64>,
}

impl FcnnModel {
    pub fn init(
        arch: ArchSpec,
        stats: Standardization,
        taus: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        stats.validate()?;
        if taus.len() != arch.output_dim {
            return Err(ModelError::BadArch(format!(
                "{} percentiles for output_dim {}",
                taus.len(),
                arch.output_dim
            )));
        }
        if taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(ModelError::BadArch("fixed percentiles must lie in (0,1)".into()));
        }
        let params = glorot_params(&arch, false, rng)?;
        Ok(Self {
            arch,
            stats,
            params,
            taus,
        })
    }

    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Result<BoundFcnn<'m>, ModelError> {
        let mut vars = HashMap::new();
        for (name, tensor) in self.params.iter() {
            vars.insert(name.to_string(), tape.param(name, tensor.clone())?);
        }
        Ok(BoundFcnn { model: self, vars })
    }

    /// Predictions in standardized units, one column per fixed percentile.
    pub fn forward(&self, x_std: &Tensor2) -> Result<Tensor2, ModelError> {
        if x_std.cols() != self.arch.input_dim {
            return Err(ModelError::WrongInputDim {
                expected: self.arch.input_dim,
                got: x_std.cols(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.input(x_std.clone());
        let out = bound.forward(&mut tape, x)?;
        Ok(tape.value(out)?.clone())
    }

    pub fn save(&self, path: &Path, kind: FcnnKind) -> Result<(), ModelFileError> {
        ModelFile::from_fcnn(self, kind).write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, FcnnKind), ModelFileError> {
        ModelFile::read(path)?.into_fcnn()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcnnKind {
    /// One net per percentile, trained independently.
    Separate,
    /// A single net emitting every percentile at once.
    Joint,
}

impl FcnnKind {
    fn tag(self) -> &'static str {
        match self {
            FcnnKind::Separate => "fcnn",
            FcnnKind::Joint => "fcnn-joint",
        }
    }
}

pub struct BoundFcnn<'m> {
    model: &'m FcnnModel,
    vars: HashMap<String, Var>,
}

impl BoundFcnn<'_> {
    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from bound model"))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let arch = &self.model.arch;
        let mut h = x;
        for i in 0..arch.feature_widths.len() {
            let pre = tape.matmul(h, self.var(&format!("feat{i}.w")))?;
            let pre = tape.broadcast_add_row(pre, self.var(&format!("feat{i}.b")))?;
            h = tape.glu(pre)?;
        }
        for j in 0..arch.regression_widths.len() {
            let pre = tape.matmul(h, self.var(&format!("reg{j}.w")))?;
            let pre = tape.broadcast_add_row(pre, self.var(&format!("reg{j}.b")))?;
            h = tape.relu(pre)?;
        }
        let out = tape.matmul(h, self.var("out.w"))?;
        Ok(tape.broadcast_add_row(out, self.var("out.b"))?)
    }
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamBlock {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: String,
    arch: ArchSpec,
    stats: Standardization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trained_heads: Option<TrainedHeads>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    taus: Option<Vec<f64>>,
    params: Vec<ParamBlock>,
}

impl ModelFile {
    fn from_params(params: &ParamSet) -> Vec<ParamBlock> {
        params
            .iter()
            .map(|(name, t)| ParamBlock {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                values: t.data().to_vec(),
            })
            .collect()
    }

    fn from_ddr(model: &DdrModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: "ddr".to_string(),
            arch: model.arch.clone(),
            stats: model.stats.clone(),
            trained_heads: Some(model.trained_heads),
            taus: None,
            params: Self::from_params(&model.params),
        }
    }

    fn from_fcnn(model: &FcnnModel, kind: FcnnKind) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.tag().to_string(),
            arch: model.arch.clone(),
            stats: model.stats.clone(),
            trained_heads: None,
            taus: Some(model.taus.clone()),
            params: Self::from_params(&model.params),
        }
    }

    fn write(&self, path: &Path) -> Result<(), ModelFileError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    fn read(path: &Path) -> Result<Self, ModelFileError> {
        let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if file.format_version != FORMAT_VERSION {
            return Err(ModelFileError::UnsupportedVersion {
                got: file.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(file)
    }

    /// Check blocks against the architecture's expected names and shapes, in
    /// any order, and build the parameter set in canonical order.
    fn collect_params(&self, injected: bool) -> Result<ParamSet, ModelFileError> {
        let expected = expected_params(&self.arch, injected);
        let mut by_name: HashMap<&str, &ParamBlock> = HashMap::new();
        for block in &self.params {
            if by_name.insert(block.name.as_str(), block).is_some() {
                return Err(ModelFileError::Incompatible(format!(
                    "duplicate parameter block {:?}",
                    block.name
                )));
            }
        }
        if by_name.len() != expected.len() {
            return Err(ModelFileError::Incompatible(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                by_name.len()
            )));
        }
        let mut params = ParamSet::new();
        for (name, rows, cols) in &expected {
            let block = by_name.get(name.as_str()).ok_or_else(|| {
                ModelFileError::Incompatible(format!("missing parameter {name:?}"))
            })?;
            if block.rows != *rows || block.cols != *cols {
                return Err(ModelFileError::Incompatible(format!(
                    "parameter {:?} has shape {}x{}, architecture expects {}x{}",
                    name, block.rows, block.cols, rows, cols
                )));
            }
            let tensor = Tensor2::new(block.rows, block.cols, block.values.clone())?;
            params.insert(name, tensor)?;
        }
        Ok(params)
    }

    fn into_ddr(self) -> Result<DdrModel, ModelFileError> {
        if self.kind != "ddr" {
            return Err(ModelFileError::WrongKind {
                expected: "ddr".to_string(),
                got: self.kind,
            });
        }
        self.arch.validate()?;
        self.stats.validate()?;
        let params = self.collect_params(true)?;
        Ok(DdrModel {
            arch: self.arch,
            stats: self.stats,
            params,
            trained_heads: self.trained_heads.unwrap_or_default(),
        })
    }

    fn into_fcnn(self) -> Result<(FcnnModel, FcnnKind), ModelFileError> {
        let kind = match self.kind.as_str() {
            "fcnn" => FcnnKind::Separate,
            "fcnn-joint" => FcnnKind::Joint,
            other => {
                return Err(ModelFileError::WrongKind {
                    expected: "fcnn or fcnn-joint".to_string(),
                    got: other.to_string(),
                })
            }
        };
        self.arch.validate()?;
        self.stats.validate()?;
        let taus = self.taus.clone().ok_or_else(|| {
            ModelFileError::Incompatible("fcnn model file lacks fixed percentiles".into())
        })?;
        if taus.len() != self.arch.output_dim {
            return Err(ModelFileError::Incompatible(format!(
                "{} percentiles for output_dim {}",
                taus.len(),
                self.arch.output_dim
            )));
        }
        let params = self.collect_params(false)?;
        Ok((
            FcnnModel {
                arch: self.arch,
                stats: self.stats,
                params,
                taus,
            },
            kind,
        ))
    }
}

/// Kind tag of a model file without fully loading it.
pub fn peek_kind(path: &Path) -> Result<String, ModelFileError> {
    Ok(ModelFile::read(path)?.kind)
}

/// Quantile surface: predicted target value per row at a percentile.
pub trait QuantilePredictor {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError>;
    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError>;
}

/// CDF surface: probability of the target not exceeding a value, per row.
pub trait CdfPredictor {
    fn cdf_batch(&self, y: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError>;
    fn cdf_rows(&self, ys: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError>;
    /// Target bounds seen in training; inversion searches 50% beyond them.
    fn y_range(&self) -> (f64, f64);
}

/// Model view in standardized units (both x and y).
pub struct StdSpace<'a>(pub &'a DdrModel);

/// Model view in original data units.
pub struct OrigSpace<'a>(pub &'a DdrModel);

impl QuantilePredictor for StdSpace<'_> {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.q_forward(tau, x)?.column(0).map_err(Into::into)
    }

    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        self.0.q_forward_rows(taus, x)?.column(0).map_err(Into::into)
    }
}

impl CdfPredictor for StdSpace<'_> {
    fn cdf_batch(&self, y: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        Ok(self.0.f_forward(y, x)?.1.column(0)?)
    }

    fn cdf_rows(&self, ys: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        Ok(self.0.f_forward_rows(ys, x)?.1.column(0)?)
    }

    fn y_range(&self) -> (f64, f64) {
        (self.0.stats.y_min_std, self.0.stats.y_max_std)
    }
}

impl QuantilePredictor for OrigSpace<'_> {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        let xs = self.0.stats.apply_x(x)?;
        let q = self.0.q_forward(tau, &xs)?.column(0)?;
        Ok(q.into_iter().map(|v| self.0.stats.invert_y(v)).collect())
    }

    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        let xs = self.0.stats.apply_x(x)?;
        let q = self.0.q_forward_rows(taus, &xs)?.column(0)?;
        Ok(q.into_iter().map(|v| self.0.stats.invert_y(v)).collect())
    }
}

impl CdfPredictor for OrigSpace<'_> {
    fn cdf_batch(&self, y: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        let xs = self.0.stats.apply_x(x)?;
        Ok(self.0.f_forward(self.0.stats.apply_y(y), &xs)?.1.column(0)?)
    }

    fn cdf_rows(&self, ys: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        let xs = self.0.stats.apply_x(x)?;
        let ys_std: Vec<f64> = ys.iter().map(|&y| self.0.stats.apply_y(y)).collect();
        Ok(self.0.f_forward_rows(&ys_std, &xs)?.1.column(0)?)
    }

    fn y_range(&self) -> (f64, f64) {
        (
            self.0.stats.invert_y(self.0.stats.y_min_std),
            self.0.stats.invert_y(self.0.stats.y_max_std),
        )
    }
}

/// One or more fixed-percentile nets acting as a single quantile surface.
/// Queries must hit one of the fixed percentiles.
pub struct FcnnEnsemble {
    pub models: Vec<FcnnModel>,
}

impl FcnnEnsemble {
    pub fn new(models: Vec<FcnnModel>) -> Result<Self, ModelError> {
        if models.is_empty() {
            return Err(ModelError::BadArch("empty ensemble".into()));
        }
        Ok(Self { models })
    }

    pub fn taus(&self) -> Vec<f64> {
        self.models.iter().flat_map(|m| m.taus.iter().copied()).collect()
    }

    fn locate(&self, tau: f64) -> Result<(usize, usize), ModelError> {
        for (mi, model) in self.models.iter().enumerate() {
            for (ci, &t) in model.taus.iter().enumerate() {
                if (t - tau).abs() < 1e-9 {
                    return Ok((mi, ci));
                }
            }
        }
        Err(ModelError::UnsupportedTau(tau))
    }

    pub fn std_space(&self) -> FcnnSpace<'_> {
        FcnnSpace {
            ensemble: self,
            orig: false,
        }
    }

    pub fn orig_space(&self) -> FcnnSpace<'_> {
        FcnnSpace {
            ensemble: self,
            orig: true,
        }
    }
}

pub struct FcnnSpace<'a> {
    ensemble: &'a FcnnEnsemble,
    orig: bool,
}

impl QuantilePredictor for FcnnSpace<'_> {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        let (mi, ci) = self.ensemble.locate(tau)?;
        let model = &self.ensemble.models[mi];
        let xs = if self.orig { model.stats.apply_x(x)? } else { x.clone() };
        let col = model.forward(&xs)?.column(ci)?;
        if self.orig {
            Ok(col.into_iter().map(|v| model.stats.invert_y(v)).collect())
        } else {
            Ok(col)
        }
    }

    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        if taus.len() != x.rows() {
            return Err(ModelError::RowCountMismatch {
                left: taus.len(),
                right: x.rows(),
            });
        }
        // fixed-percentile nets have no per-row percentile path; evaluate all
        // heads once and gather
        let mut out = vec![0.0; taus.len()];
        let mut cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for (r, &tau) in taus.iter().enumerate() {
            let key = self.ensemble.locate(tau)?;
            if !cache.contains_key(&key) {
                let model = &self.ensemble.models[key.0];
                let xs = if self.orig { model.stats.apply_x(x)? } else { x.clone() };
                let col = model.forward(&xs)?.column(key.1)?;
                let col = if self.orig {
                    col.into_iter().map(|v| model.stats.invert_y(v)).collect()
                } else {
                    col
                };
                cache.insert(key, col);
            }
            out[r] = cache[&key][r];
        }
        Ok(out)
    }
}

/// Closure-backed quantile surface for analytic references in tests.
pub struct FnQuantile<F: Fn(f64, &[f64]) -> f64>(pub F);

impl<F: Fn(f64, &[f64]) -> f64> QuantilePredictor for FnQuantile<F> {
    fn quantile_batch(&self, tau: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        Ok((0..x.rows())
            .map(|r| (self.0)(tau, row_slice(x, r)))
            .collect())
    }

    fn quantile_rows(&self, taus: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        if taus.len() != x.rows() {
            return Err(ModelError::RowCountMismatch {
                left: taus.len(),
                right: x.rows(),
            });
        }
        Ok(taus
            .iter()
            .enumerate()
            .map(|(r, &tau)| (self.0)(tau, row_slice(x, r)))
            .collect())
    }
}

/// Closure-backed CDF surface with explicit target bounds.
pub struct FnCdf<F: Fn(f64, &[f64]) -> f64> {
    pub f: F,
    pub y_range: (f64, f64),
}

impl<F: Fn(f64, &[f64]) -> f64> CdfPredictor for FnCdf<F> {
    fn cdf_batch(&self, y: f64, x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        Ok((0..x.rows()).map(|r| (self.f)(y, row_slice(x, r))).collect())
    }

    fn cdf_rows(&self, ys: &[f64], x: &Tensor2) -> Result<Vec<f64>, ModelError> {
        if ys.len() != x.rows() {
            return Err(ModelError::RowCountMismatch {
                left: ys.len(),
                right: x.rows(),
            });
        }
        Ok(ys
            .iter()
            .enumerate()
            .map(|(r, &y)| (self.f)(y, row_slice(x, r)))
            .collect())
    }

    fn y_range(&self) -> (f64, f64) {
        self.y_range
    }
}

fn row_slice(x: &Tensor2, r: usize) -> &[f64] {
    &x.data()[r * x.cols()..(r + 1) * x.cols()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 2,
            feature_widths: vec![4, 3],
            regression_widths: vec![5],
            injection: InjectionMode::Linear,
            output_dim: 1,
        }
    }

    fn small_model() -> DdrModel {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        DdrModel::init(small_arch(), Standardization::identity(2), &mut rng).unwrap()
    }

    #[test]
    fn init_shapes_follow_architecture() {
        let model = small_model();
        assert_eq!(model.params.get("feat0.w").unwrap().shape(), (2, 8));
        assert_eq!(model.params.get("feat0.tau.w").unwrap().shape(), (1, 8));
        assert_eq!(model.params.get("feat1.w").unwrap().shape(), (4, 6));
        assert_eq!(model.params.get("feat1.y.b").unwrap().shape(), (1, 6));
        assert_eq!(model.params.get("reg0.w").unwrap().shape(), (3, 5));
        assert_eq!(model.params.get("out.w").unwrap().shape(), (5, 1));
        // biases start at zero
        assert!(model.params.get("reg0.b").unwrap().data().iter().all(|&v| v == 0.0));
        // weights do not
        assert!(model.params.get("feat0.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mlp_projection_adds_parameters() {
        let mut arch = small_arch();
        arch.injection = InjectionMode::MlpProjection;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = DdrModel::init(arch, Standardization::identity(2), &mut rng).unwrap();
        assert_eq!(model.params.get("feat0.tau.p1w").unwrap().shape(), (1, 8));
        assert_eq!(model.params.get("feat0.tau.p2w").unwrap().shape(), (4, 8));
        let x = Tensor2::from_rows(&[vec![0.3, -0.2]]).unwrap();
        assert!(model.q_forward(0.7, &x).is_ok());
    }

    #[test]
    fn forwards_validate_inputs() {
        let model = small_model();
        let x = Tensor2::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap();
        assert_eq!(model.median_forward(&x).unwrap().shape(), (2, 1));
        assert_eq!(model.q_forward(0.3, &x).unwrap().shape(), (2, 1));
        let (eta, prob) = model.f_forward(0.5, &x).unwrap();
        assert_eq!(eta.shape(), (2, 1));
        for (&e, &p) in eta.data().iter().zip(prob.data()) {
            assert!((p - sigmoid(e)).abs() < 1e-15);
            assert!(p > 0.0 && p < 1.0);
        }

        let wrong = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            model.median_forward(&wrong),
            Err(ModelError::WrongInputDim { expected: 2, got: 3 })
        ));
        assert!(matches!(
            model.q_forward(0.0, &x),
            Err(ModelError::TauOutOfRange(_))
        ));
        assert!(matches!(
            model.q_forward(1.0, &x),
            Err(ModelError::TauOutOfRange(_))
        ));
        assert!(model.q_forward(0.99999, &x).is_ok());
    }

    #[test]
    fn tau_is_clipped_at_the_working_range() {
        let model = small_model();
        let x = Tensor2::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let tiny = model.q_forward(1e-9, &x).unwrap();
        let at_eps = model.q_forward(TAU_EPS, &x).unwrap();
        assert_eq!(tiny, at_eps);
    }

    #[test]
    fn heads_share_backbone_weights() {
        let mut model = small_model();
        let x = Tensor2::from_rows(&[vec![0.4, -0.1]]).unwrap();
        let m0 = model.median_forward(&x).unwrap();
        let q0 = model.q_forward(0.7, &x).unwrap();
        let f0 = model.f_forward(0.2, &x).unwrap().0;

        let w = model.params.get_mut("feat0.w").unwrap();
        let bumped = w.get(0, 0).unwrap() + 0.5;
        w.set(0, 0, bumped).unwrap();

        assert!(model.median_forward(&x).unwrap().max_abs_diff(&m0).unwrap() > 0.0);
        assert!(model.q_forward(0.7, &x).unwrap().max_abs_diff(&q0).unwrap() > 0.0);
        assert!(model.f_forward(0.2, &x).unwrap().0.max_abs_diff(&f0).unwrap() > 0.0);
    }

    #[test]
    fn per_row_taus_match_single_tau_calls() {
        let model = small_model();
        let x = Tensor2::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap();
        let merged = model.q_forward_rows(&[0.3, 0.8], &x).unwrap();
        let row0 = Tensor2::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let row1 = Tensor2::from_rows(&[vec![-0.3, 0.4]]).unwrap();
        let q0 = model.q_forward(0.3, &row0).unwrap();
        let q1 = model.q_forward(0.8, &row1).unwrap();
        assert!((merged.get(0, 0).unwrap() - q0.get(0, 0).unwrap()).abs() < 1e-12);
        assert!((merged.get(1, 0).unwrap() - q1.get(0, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let mut model = small_model();
        model.trained_heads = TrainedHeads { q: true, f: true };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ddr");
        model.save(&path).unwrap();
        let loaded = DdrModel::load(&path).unwrap();
        assert_eq!(model, loaded);

        let x = Tensor2::from_rows(&[vec![0.25, -0.75]]).unwrap();
        let a = model.q_forward(0.42, &x).unwrap();
        let b = loaded.q_forward(0.42, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_incompatible_files() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ddr");
        model.save(&path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut file: serde_json::Value = serde_json::from_str(&text).unwrap();

        file["format_version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            DdrModel::load(&path),
            Err(ModelFileError::UnsupportedVersion { got: 99, .. })
        ));

        file["format_version"] = serde_json::json!(1);
        file["arch"]["feature_widths"] = serde_json::json!([4, 7]);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            DdrModel::load(&path),
            Err(ModelFileError::Incompatible(_))
        ));
    }

    #[test]
    fn fcnn_roundtrip_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = ArchSpec {
            input_dim: 2,
            feature_widths: vec![4],
            regression_widths: vec![3],
            injection: InjectionMode::Linear,
            output_dim: 2,
        };
        let model = FcnnModel::init(
            arch,
            Standardization::identity(2),
            vec![0.25, 0.75],
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcnn");
        model.save(&path, FcnnKind::Joint).unwrap();
        let (loaded, kind) = FcnnModel::load(&path).unwrap();
        assert_eq!(kind, FcnnKind::Joint);
        assert_eq!(model, loaded);
        assert!(matches!(
            DdrModel::load(&path),
            Err(ModelFileError::WrongKind { .. })
        ));

        let ensemble = FcnnEnsemble::new(vec![loaded]).unwrap();
        let x = Tensor2::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0]]).unwrap();
        let q = ensemble.std_space().quantile_batch(0.75, &x).unwrap();
        assert_eq!(q.len(), 2);
        assert!(matches!(
            ensemble.std_space().quantile_batch(0.33, &x),
            Err(ModelError::UnsupportedTau(_))
        ));
    }

    #[test]
    fn orig_space_wraps_standardization() {
        let mut model = small_model();
        model.stats = Standardization {
            x_mean: vec![1.0, -2.0],
            x_std: vec![2.0, 0.5],
            y_mean: 10.0,
            y_std: 4.0,
            y_min_std: -2.0,
            y_max_std: 2.0,
        };
        let x_orig = Tensor2::from_rows(&[vec![3.0, -1.5]]).unwrap();
        let x_std = Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let via_orig = OrigSpace(&model).quantile_batch(0.6, &x_orig).unwrap();
        let via_std = StdSpace(&model).quantile_batch(0.6, &x_std).unwrap();
        assert!((via_orig[0] - (via_std[0] * 4.0 + 10.0)).abs() < 1e-12);

        let (lo, hi) = OrigSpace(&model).y_range();
        assert_eq!((lo, hi), (2.0, 18.0));
    }
}
