//! `ddr curves`: quantile curves over a grid of a single feature, one row
//! per grid point, one column per percentile. The table plots directly as
//! fan charts.

use std::path::PathBuf;

use clap::Args;

use ddr_core::inference::predict_mean;
use ddr_core::network::{OrigSpace, QuantilePredictor};
use ddr_core::sampler::DECILES;
use ddr_core::Tensor2;

use crate::model::{parse_infer_mode, DualSpace, DynQ, InferMode, ModelHandle};
use crate::table::{linspace, tau_column, write_csv};
use crate::CliError;

#[derive(Args)]
pub struct CurvesArgs {
    /// Trained model path; the model must take a single feature
    #[arg(long)]
    model: PathBuf,
    /// Number of grid points across [x-min, x-max]
    #[arg(long, default_value_t = 101)]
    grid: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    x_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    x_max: f64,
    /// Percentiles to tabulate; defaults to the nine deciles
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Add a mean_trapz column
    #[arg(long)]
    mean: bool,
    /// Interior node count of the trapezoid grid
    #[arg(long, default_value_t = 999)]
    n: usize,
    /// direct or dual
    #[arg(long, default_value = "direct", value_parser = parse_infer_mode)]
    mode: InferMode,
    /// Blend weight for dual mode: 1 is Q-direct, 0 is F-inverted
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Bisection tolerance for dual mode
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: CurvesArgs) -> Result<(), CliError> {
    let handle = ModelHandle::load(&args.model)?;
    if handle.input_dim() != 1 {
        return Err(CliError::msg(format!(
            "curves needs a single-feature model; this one takes {} features",
            handle.input_dim()
        )));
    }
    if args.grid < 2 {
        return Err(CliError::msg("--grid must be at least 2"));
    }
    if !(args.x_min < args.x_max) {
        return Err(CliError::msg(format!(
            "empty feature range [{}, {}]",
            args.x_min, args.x_max
        )));
    }

    let xs = linspace(args.x_min, args.x_max, args.grid);
    let x = Tensor2::from_column(&xs).map_err(|e| CliError::Model(e.into()))?;
    let taus = if args.taus.is_empty() { DECILES.to_vec() } else { args.taus.clone() };

    let q: Box<dyn QuantilePredictor + '_> = match (&handle, args.mode) {
        (ModelHandle::Ddr(m), InferMode::Direct) => Box::new(OrigSpace(m)),
        (ModelHandle::Ddr(m), InferMode::Dual) => {
            Box::new(DualSpace::new(m, args.alpha, args.tol)?)
        }
        (ModelHandle::Fcnn(e), InferMode::Direct) => Box::new(e.orig_space()),
        (ModelHandle::Fcnn(_), InferMode::Dual) => {
            return Err(CliError::msg(
                "dual inference requires a trained F head; this model was trained without one",
            ));
        }
    };

    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for &tau in &taus {
        columns.push((tau_column(tau), q.quantile_batch(tau, &x)?));
    }
    if args.mean {
        columns.push((
            "mean_trapz".to_string(),
            predict_mean(&DynQ(q.as_ref()), &x, args.n)?,
        ));
    }

    let mut header = vec!["x".to_string()];
    header.extend(columns.iter().map(|(name, _)| name.clone()));
    let rows = xs.iter().enumerate().map(|(r, &xv)| {
        let mut row = vec![xv.to_string()];
        row.extend(columns.iter().map(|(_, vals)| vals[r].to_string()));
        row
    });
    write_csv(args.out.as_deref(), &header, rows)
}
