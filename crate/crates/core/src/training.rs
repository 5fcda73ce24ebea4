//! Training loops: annealed joint/disjoint/Q-only runs and the fixed-decile
//! baselines.
//!
//! One run owns its model and its sampler. The sampler draws every batch
//! field on every step regardless of which loss terms are active, so runs
//! that differ only in mode consume random streams identically and stay
//! seed-comparable. Checkpoint selection is on validation q_s.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::tape::{AdError, Tape, Var};
use crate::autodiff::tensor::Tensor2;
use crate::data::{empirical_quantile, Dataset, SplitTag};
use crate::losses::{
    read_breakdown, total_loss_on_tape, Batch, LossBreakdown, LossError, LossTerms, Term,
};
use crate::metrics::{self, MetricsError};
use crate::network::{
    ArchSpec, BoundFcnn, DdrModel, FcnnModel, ModelError, ParamSet, QuantilePredictor, StdSpace,
    TrainedHeads, TAU_EPS,
};
use crate::optimizer::{Adam, AdamConfig, OptimizerError};
use crate::sampler::{gather_rows, Sampler, SamplerConfig, SamplerError, TauPrior, DECILES};

/// Stream id for parameter initialization; the sampler owns ids 1 through 6.
pub const INIT_STREAM: u64 = 0;
/// Per-net initialization streams for the nine-net baseline start here.
const FCNN_INIT_BASE: u64 = 16;
/// Per-epoch crossing-rate logging runs on at most this many validation rows.
const VAL_CROSSING_ROWS: usize = 512;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset must be standardized (with splits assigned) before training")]
    NotStandardized,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("architecture expects {arch} input features, dataset has {data}")]
    InputDimMismatch { arch: usize, data: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    DdrJoint,
    DdrDisjoint,
    DdrQ,
    Fcnn,
    FcnnJoint,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::DdrJoint,
        TrainMode::DdrDisjoint,
        TrainMode::DdrQ,
        TrainMode::Fcnn,
        TrainMode::FcnnJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::DdrJoint => "ddr-joint",
            TrainMode::DdrDisjoint => "ddr-disjoint",
            TrainMode::DdrQ => "ddr-q",
            TrainMode::Fcnn => "fcnn",
            TrainMode::FcnnJoint => "fcnn-joint",
        }
    }

    /// Whether the mode trains the CDF head.
    pub fn uses_f_head(self) -> bool {
        matches!(self, TrainMode::DdrJoint | TrainMode::DdrDisjoint)
    }

    pub fn is_ddr(self) -> bool {
        matches!(
            self,
            TrainMode::DdrJoint | TrainMode::DdrDisjoint | TrainMode::DdrQ
        )
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown mode `{s}` (expected one of: {})",
                    TrainMode::ALL.map(|m| m.name()).join(", ")
                )
            })
    }
}

/// Piecewise-linear weight: `start` at step 0, `end` once `ramp_frac` of the
/// total steps have elapsed, interpolated in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub start: f64,
    pub end: f64,
    pub ramp_frac: f64,
}

impl Ramp {
    pub const fn constant(w: f64) -> Self {
        Ramp {
            start: w,
            end: w,
            ramp_frac: 0.0,
        }
    }

    pub const fn rise(end: f64, ramp_frac: f64) -> Self {
        Ramp {
            start: 0.0,
            end,
            ramp_frac,
        }
    }

    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        let span = self.ramp_frac * total_steps as f64;
        let t = if span <= 0.0 {
            1.0
        } else {
            (step as f64 / span).min(1.0)
        };
        self.start + (self.end - self.start) * t
    }
}

/// One ramp per loss term. Defaults follow the median-first principle: the
/// median term carries full weight from step 0, the Monte Carlo and anchor
/// terms ramp in over the first quarter of training, and the structural
/// penalties (monotonicity, recovery, duality) over the first half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub median: Ramp,
    pub pinball_mc: Ramp,
    pub pinball_anchor: Ramp,
    pub cdf_nll_mc: Ramp,
    pub cdf_nll_anchor: Ramp,
    pub grad_q: Ramp,
    pub grad_f: Ramp,
    pub recover_q: Ramp,
    pub recover_f: Ramp,
    pub dual_q: Ramp,
    pub dual_f: Ramp,
}

impl AnnealSchedule {
    pub fn default_for(mode: TrainMode) -> Self {
        let off = Ramp::constant(0.0);
        let quarter = Ramp::rise(1.0, 0.25);
        let half = Ramp::rise(1.0, 0.5);
        let with_f = mode.uses_f_head();
        let joint = mode == TrainMode::DdrJoint;
        AnnealSchedule {
            median: Ramp::constant(1.0),
            pinball_mc: quarter,
            pinball_anchor: quarter,
            cdf_nll_mc: if with_f { quarter } else { off },
            cdf_nll_anchor: if with_f { quarter } else { off },
            grad_q: half,
            grad_f: if with_f { half } else { off },
            recover_q: if joint { half } else { off },
            recover_f: if joint { half } else { off },
            dual_q: if joint { half } else { off },
            dual_f: if joint { half } else { off },
        }
    }

    pub fn get(&self, term: Term) -> Ramp {
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

    pub fn validate(&self) -> Result<(), TrainError> {
        for term in Term::ALL {
            let r = self.get(term);
            if r.start < 0.0 || r.end < 0.0 {
                return Err(TrainError::Config(format!(
                    "negative anneal weight for {}",
                    term.name()
                )));
            }
            if !(0.0..=1.0).contains(&r.ramp_frac) {
                return Err(TrainError::Config(format!(
                    "ramp fraction for {} outside [0, 1]",
                    term.name()
                )));
            }
        }
        // median-first: the median term may not dip below its end value
        if self.median.start < self.median.end {
            return Err(TrainError::Config(
                "median weight must start at or above its end value".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluate every term's ramp at one step.
pub fn anneal_weights(schedule: &AnnealSchedule, step: usize, total_steps: usize) -> LossTerms {
    let mut w = LossTerms::default();
    for term in Term::ALL {
        w.set(term, schedule.get(term).at(step, total_steps));
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Fraction of non-test rows held out for validation; consumed when
    /// splits are assigned, recorded here so a config file is self-contained.
    pub val_fraction: f64,
    /// Early stopping: halt after this many epochs without a new best
    /// validation q_s.
    pub patience: usize,
    pub seed: u64,
    /// Feature-part parameters update every step; regression-part parameters
    /// every `update_ratio` steps.
    pub update_ratio: u32,
    /// Finite-difference half-width for the monotonicity and dual probes.
    pub probe_eps: f64,
    pub tau_prior: TauPrior,
    pub arch: ArchSpec,
    /// `None` selects the mode's default schedule.
    pub anneal: Option<AnnealSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::DdrJoint,
            epochs: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            val_fraction: 0.2,
            patience: 20,
            seed: 0,
            update_ratio: 2,
            probe_eps: 1e-2,
            tau_prior: TauPrior::Uniform,
            arch: ArchSpec::default_ddr(1),
            anneal: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(TrainError::Config(
                "validation fraction must lie in (0, 0.5]".into(),
            ));
        }
        if self.update_ratio == 0 {
            return Err(TrainError::Config("update ratio must be at least 1".into()));
        }
        if !(self.probe_eps > 0.0 && self.probe_eps < 0.5 - TAU_EPS) {
            return Err(TrainError::Config("probe epsilon out of range".into()));
        }
        if let Some(schedule) = &self.anneal {
            schedule.validate()?;
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Validation metrics after one epoch. For the nine-net baseline, `net`
/// identifies the network and `qs` holds its own-percentile pinball (its
/// contribution to the ensemble q_s); metrics that need other percentiles
/// are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValEpoch {
    pub net: usize,
    pub epoch: usize,
    /// Mean weighted training loss over the epoch's steps.
    pub train_total: f64,
    pub qs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crossing_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recover_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recover_f: Option<f64>,
}

/// Run log. Two runs with identical config and seed produce identical
/// reports except for `wall_clock_secs`; compare through
/// [`TrainReport::without_timing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub planned_steps: usize,
    pub steps_run: usize,
    /// Selected checkpoint epoch per trained network (one entry except for
    /// the nine-net baseline).
    pub selected_epochs: Vec<usize>,
    /// Best validation q_s; for the nine-net baseline, the sum of each net's
    /// best own-percentile pinball.
    pub best_val_qs: f64,
    /// Per-epoch mean loss terms with the weights in force at epoch end.
    pub epoch_loss: Vec<LossBreakdown>,
    pub val: Vec<ValEpoch>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn without_timing(mut self) -> Self {
        self.wall_clock_secs = 0.0;
        self
    }
}

#[derive(Debug, Clone)]
pub enum TrainOutcome {
    Ddr(DdrModel),
    Fcnn(Vec<FcnnModel>),
    FcnnJoint(FcnnModel),
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn is_feature_part(name: &str) -> bool {
    name.starts_with("feat")
}

struct SplitData {
    x_train: Tensor2,
    y_train: Vec<f64>,
    x_val: Tensor2,
    y_val: Vec<f64>,
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainOutcome, TrainReport), TrainError> {
    cfg.validate()?;
    let stats = dataset.stats().ok_or(TrainError::NotStandardized)?.clone();
    let (x_train, y_train) = dataset.rows_of(SplitTag::Train);
    let (x_val, y_val) = dataset.rows_of(SplitTag::Val);
    if x_train.rows() == 0 {
        return Err(TrainError::EmptySplit("train"));
    }
    if x_val.rows() == 0 {
        return Err(TrainError::EmptySplit("validation"));
    }
    if cfg.arch.input_dim != x_train.cols() {
        return Err(TrainError::InputDimMismatch {
            arch: cfg.arch.input_dim,
            data: x_train.cols(),
        });
    }
    let data = SplitData {
        x_train,
        y_train,
        x_val,
        y_val,
    };
    match cfg.mode {
        TrainMode::Fcnn => train_fcnn(&data, stats, cfg, false),
        TrainMode::FcnnJoint => train_fcnn(&data, stats, cfg, true),
        _ => train_ddr(&data, stats, cfg),
    }
}

fn make_sampler(cfg: &TrainConfig, y_train: &[f64]) -> Result<Sampler, TrainError> {
    let mut sorted = y_train.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut scfg = SamplerConfig::new(cfg.seed, cfg.batch_size);
    scfg.tau_prior = cfg.tau_prior;
    scfg.y_bounds = Some((sorted[0], sorted[sorted.len() - 1]));
    scfg.y_anchors = DECILES
        .iter()
        .map(|&t| empirical_quantile(&sorted, t))
        .collect::<Result<_, _>>()
        .map_err(|e| TrainError::Config(format!("anchor grid: {e}")))?;
    Ok(Sampler::new(scfg)?)
}

fn train_ddr(
    data: &SplitData,
    stats: crate::network::Standardization,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, TrainReport), TrainError> {
    let started = Instant::now();
    let schedule = cfg
        .anneal
        .unwrap_or_else(|| AnnealSchedule::default_for(cfg.mode));
    schedule.validate()?;
    let mut sampler = make_sampler(cfg, &data.y_train)?;
    let mut rng = init_rng(cfg.seed, INIT_STREAM);
    let mut model = DdrModel::init(cfg.arch.clone(), stats, &mut rng)?;
    let mut adam = Adam::new(cfg.adam());

    let steps_per_epoch = data.x_train.rows().div_ceil(cfg.batch_size);
    let planned_steps = cfg.epochs * steps_per_epoch;
    let with_f = cfg.mode.uses_f_head();

    let mut epoch_loss = Vec::new();
    let mut val_log = Vec::new();
    let mut best: Option<(f64, ParamSet, usize)> = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut term_sums = LossTerms::default();
        let mut total_sum = 0.0;
        let mut last_weights = LossTerms::default();
        let mut steps_this_epoch = 0usize;

        for idx in sampler.epoch_batches(data.x_train.rows()) {
            let n = idx.len();
            let batch = Batch {
                x: gather_rows(&data.x_train, &idx),
                y: idx.iter().map(|&i| data.y_train[i]).collect(),
                taus: sampler.sample_tau(n),
                ytildes: sampler.sample_ytilde(n)?,
                anchor_taus: sampler.sample_tau_anchor(n)?,
                anchor_ytildes: sampler.sample_y_anchor(n)?,
            };
            let weights = anneal_weights(&schedule, global_step, planned_steps);

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let (total, parts) = total_loss_on_tape(&mut tape, &bound, &batch, &weights, cfg.probe_eps)?;
            let breakdown = read_breakdown(&tape, total, &parts, &weights)?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: global_step,
                });
            }
            let grads = tape.backward(total)?;
            let regression_steps = global_step as u64 % cfg.update_ratio as u64 == 0;
            adam.step(&mut model.params, &grads, |name| {
                is_feature_part(name) || regression_steps
            })?;

            for term in Term::ALL {
                term_sums.set(term, term_sums.get(term) + breakdown.terms.get(term));
            }
            total_sum += breakdown.total;
            last_weights = weights;
            global_step += 1;
            steps_this_epoch += 1;
        }

        let inv = 1.0 / steps_this_epoch as f64;
        let mut mean_terms = LossTerms::default();
        for term in Term::ALL {
            mean_terms.set(term, term_sums.get(term) * inv);
        }
        epoch_loss.push(LossBreakdown {
            terms: mean_terms,
            weights: last_weights,
            total: total_sum * inv,
        });

        let val = eval_ddr_epoch(&model, data, epoch, total_sum * inv, with_f)?;
        let qs = val.qs;
        val_log.push(val);

        let improved = best.as_ref().is_none_or(|(b, _, _)| qs < *b);
        if improved {
            best = Some((qs, model.params.clone(), epoch));
        } else if epoch - best.as_ref().unwrap().2 >= cfg.patience {
            break;
        }
    }

    let (best_qs, best_params, best_epoch) = best.expect("at least one epoch ran");
    model.params = best_params;
    model.trained_heads = TrainedHeads { q: true, f: with_f };

    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        planned_steps,
        steps_run: global_step,
        selected_epochs: vec![best_epoch],
        best_val_qs: best_qs,
        epoch_loss,
        val: val_log,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((TrainOutcome::Ddr(model), report))
}

fn eval_ddr_epoch(
    model: &DdrModel,
    data: &SplitData,
    epoch: usize,
    train_total: f64,
    with_f: bool,
) -> Result<ValEpoch, TrainError> {
    let space = StdSpace(model);
    let (qs, _) = metrics::qs_score(&space, &data.x_val, &data.y_val)?;
    let median = space.quantile_batch(0.5, &data.x_val)?;
    let mae = metrics::mae(&median, &data.y_val)?;
    let mse = metrics::mse(&median, &data.y_val)?;

    // crossing and recovery are logged on a row cap to keep epochs cheap
    let cap = data.x_val.rows().min(VAL_CROSSING_ROWS);
    let capped = gather_rows(&data.x_val, &(0..cap).collect::<Vec<_>>());
    let crossing = metrics::crossing_rate(
        &space,
        &capped,
        &metrics::crossing_grid(metrics::CROSSING_GRID_LEN),
    )?;

    let (recover_q, recover_f) = if with_f {
        let f_space = StdSpace(model);
        let mut rq = 0.0;
        let mut rf = 0.0;
        let (y_lo, y_hi) = crate::network::CdfPredictor::y_range(&f_space);
        for (k, &tau) in DECILES.iter().enumerate() {
            rq += crate::losses::recover_q(&space, &f_space, &vec![tau; cap], &capped)?;
            let yt = y_lo + (y_hi - y_lo) * (k as f64 + 0.5) / 9.0;
            rf += crate::losses::recover_f(&space, &f_space, &vec![yt; cap], &capped)?;
        }
        (Some(rq / 9.0), Some(rf / 9.0))
    } else {
        (None, None)
    };

    Ok(ValEpoch {
        net: 0,
        epoch,
        train_total,
        qs,
        mae: Some(mae),
        mse: Some(mse),
        crossing_rate: Some(crossing),
        recover_q,
        recover_f,
    })
}

/// Mean-over-batch pinball, summed across the net's fixed percentiles.
fn fcnn_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundFcnn<'_>,
    x: Tensor2,
    y: &[f64],
    taus: &[f64],
) -> Result<Var, TrainError> {
    let n = x.rows();
    let k = taus.len();
    let xv = tape.input(x);
    let out = bound.forward(tape, xv)?;
    let y_rep = tape.input(Tensor2::from_fn(n, k, |r, _| y[r]).map_err(ModelError::from)?);
    let tau_w = tape.input(Tensor2::from_fn(n, k, |_, c| taus[c]).map_err(ModelError::from)?);
    let comp_w = tape.input(Tensor2::from_fn(n, k, |_, c| 1.0 - taus[c]).map_err(ModelError::from)?);
    let resid = tape.sub(y_rep, out).map_err(ModelError::from)?;
    let pos = tape.relu(resid).map_err(ModelError::from)?;
    let neg_in = tape.neg(resid).map_err(ModelError::from)?;
    let neg = tape.relu(neg_in).map_err(ModelError::from)?;
    let a = tape.mul(pos, tau_w).map_err(ModelError::from)?;
    let b = tape.mul(neg, comp_w).map_err(ModelError::from)?;
    let both = tape.add(a, b).map_err(ModelError::from)?;
    let sum = tape.sum_all(both).map_err(ModelError::from)?;
    Ok(tape.scale(sum, 1.0 / n as f64).map_err(ModelError::from)?)
}

/// Validation pinball per output column, standardized units.
fn fcnn_val_pinballs(model: &FcnnModel, x: &Tensor2, y: &[f64]) -> Result<Vec<f64>, TrainError> {
    let preds = model.forward(x)?;
    let mut per = vec![0.0; model.taus.len()];
    for (c, per_c) in per.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (r, &yi) in y.iter().enumerate() {
            acc += crate::losses::pinball(model.taus[c], yi, preds.get(r, c).map_err(ModelError::from)?);
        }
        *per_c = acc / y.len() as f64;
    }
    Ok(per)
}

fn train_fcnn(
    data: &SplitData,
    stats: crate::network::Standardization,
    cfg: &TrainConfig,
    joint: bool,
) -> Result<(TrainOutcome, TrainReport), TrainError> {
    let started = Instant::now();
    let nets: Vec<Vec<f64>> = if joint {
        vec![DECILES.to_vec()]
    } else {
        DECILES.iter().map(|&t| vec![t]).collect()
    };

    let steps_per_epoch = data.x_train.rows().div_ceil(cfg.batch_size);
    let planned_steps = cfg.epochs * steps_per_epoch * nets.len();

    let mut models = Vec::with_capacity(nets.len());
    let mut epoch_loss = Vec::new();
    let mut val_log = Vec::new();
    let mut selected_epochs = Vec::with_capacity(nets.len());
    let mut best_sum = 0.0;
    let mut steps_run = 0usize;

    for (net_idx, taus) in nets.iter().enumerate() {
        let arch = ArchSpec {
            output_dim: taus.len(),
            ..cfg.arch.clone()
        };
        let stream = if joint {
            INIT_STREAM
        } else {
            FCNN_INIT_BASE + net_idx as u64
        };
        let mut rng = init_rng(cfg.seed, stream);
        let mut model = FcnnModel::init(arch, stats.clone(), taus.clone(), &mut rng)?;
        let mut adam = Adam::new(cfg.adam());
        let mut sampler = make_sampler(cfg, &data.y_train)?;
        let mut best: Option<(f64, ParamSet, usize)> = None;
        let mut global_step = 0usize;

        for epoch in 0..cfg.epochs {
            let mut total_sum = 0.0;
            let mut steps_this_epoch = 0usize;
            for idx in sampler.epoch_batches(data.x_train.rows()) {
                let xb = gather_rows(&data.x_train, &idx);
                let yb: Vec<f64> = idx.iter().map(|&i| data.y_train[i]).collect();
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape)?;
                let loss = fcnn_loss_on_tape(&mut tape, &bound, xb, &yb, taus)?;
                let value = tape
                    .value(loss)
                    .map_err(ModelError::from)?
                    .item()
                    .map_err(ModelError::from)?;
                if !value.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        step: global_step,
                    });
                }
                let grads = tape.backward(loss)?;
                let regression_steps = global_step as u64 % cfg.update_ratio as u64 == 0;
                adam.step(&mut model.params, &grads, |name| {
                    is_feature_part(name) || regression_steps
                })?;
                total_sum += value;
                global_step += 1;
                steps_this_epoch += 1;
            }
            let train_total = total_sum / steps_this_epoch as f64;
            // breakdown log: the summed pinball is the only active term
            let mut terms = LossTerms::default();
            terms.set(Term::PinballAnchor, train_total);
            let mut weights = LossTerms::default();
            weights.set(Term::PinballAnchor, 1.0);
            epoch_loss.push(LossBreakdown {
                terms,
                weights,
                total: train_total,
            });

            let per = fcnn_val_pinballs(&model, &data.x_val, &data.y_val)?;
            let qs: f64 = per.iter().sum();
            let (mae, mse) = match taus.iter().position(|&t| t == 0.5) {
                Some(c) => {
                    let preds = model.forward(&data.x_val)?;
                    let col = preds.column(c).map_err(ModelError::from)?;
                    (
                        Some(metrics::mae(&col, &data.y_val)?),
                        Some(metrics::mse(&col, &data.y_val)?),
                    )
                }
                None => (None, None),
            };
            let crossing = if taus.len() > 1 {
                Some(decile_crossings(&model, &data.x_val)?)
            } else {
                None
            };
            val_log.push(ValEpoch {
                net: net_idx,
                epoch,
                train_total,
                qs,
                mae,
                mse,
                crossing_rate: crossing,
                recover_q: None,
                recover_f: None,
            });

            let improved = best.as_ref().is_none_or(|(b, _, _)| qs < *b);
            if improved {
                best = Some((qs, model.params.clone(), epoch));
            } else if epoch - best.as_ref().unwrap().2 >= cfg.patience {
                break;
            }
        }

        let (net_best, params, best_epoch) = best.expect("at least one epoch ran");
        model.params = params;
        best_sum += net_best;
        selected_epochs.push(best_epoch);
        steps_run += global_step;
        models.push(model);
    }

    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        planned_steps,
        steps_run,
        selected_epochs,
        best_val_qs: best_sum,
        epoch_loss,
        val: val_log,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let outcome = if joint {
        TrainOutcome::FcnnJoint(models.pop().expect("one joint net"))
    } else {
        TrainOutcome::Fcnn(models)
    };
    Ok((outcome, report))
}

/// Fraction of adjacent fixed-percentile columns that invert, over rows.
fn decile_crossings(model: &FcnnModel, x: &Tensor2) -> Result<f64, TrainError> {
    let preds = model.forward(x)?;
    let k = model.taus.len();
    let mut crossings = 0usize;
    for r in 0..preds.rows() {
        for c in 0..k - 1 {
            if preds.get(r, c + 1).map_err(ModelError::from)? < preds.get(r, c).map_err(ModelError::from)? {
                crossings += 1;
            }
        }
    }
    Ok(crossings as f64 / (preds.rows() * (k - 1)) as f64)
}
