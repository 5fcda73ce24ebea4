//! `ddr predict`: per-row predictions as CSV. Columns are the input features
//! followed by one column per requested percentile (`q10`, `q50`, ...), CDF
//! probe (`F(v)`), and the optional `median` / `mean_trapz` columns.

use std::path::PathBuf;

use clap::Args;

use ddr_core::inference::predict_mean;
use ddr_core::network::{CdfPredictor, OrigSpace, QuantilePredictor};
use ddr_core::sampler::DECILES;

use crate::model::{parse_infer_mode, DualSpace, DynQ, InferMode, ModelHandle};
use crate::table::{load_features, tau_column, write_csv};
use crate::CliError;

#[derive(Args)]
pub struct PredictArgs {
    /// Trained model path (for fcnn, the base path of the .q10 .. .q90 family)
    #[arg(long)]
    model: PathBuf,
    /// Feature CSV; a surplus trailing column (or --target) is ignored
    #[arg(long)]
    data: PathBuf,
    /// Target column to ignore if the CSV carries one
    #[arg(long)]
    target: Option<String>,
    /// Percentiles to tabulate, e.g. 0.1,0.5,0.9; deciles when nothing else
    /// is requested
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    /// Values whose conditional CDF to tabulate (requires an F head)
    #[arg(long, value_delimiter = ',')]
    ytilde: Vec<f64>,
    /// Add a median column
    #[arg(long)]
    median: bool,
    /// Add a mean_trapz column (trapezoidal mean over the percentile grid)
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

pub fn run(args: PredictArgs) -> Result<(), CliError> {
    let handle = ModelHandle::load(&args.model)?;
    let (x, feature_names, skipped) =
        load_features(&args.data, handle.input_dim(), args.target.as_deref())?;
    if skipped > 0 {
        eprintln!("ddr: note: skipped {skipped} unusable rows in {}", args.data.display());
    }

    let taus = if args.tau.is_empty() && args.ytilde.is_empty() && !args.median && !args.mean {
        DECILES.to_vec()
    } else {
        args.tau.clone()
    };

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
    if !args.ytilde.is_empty() {
        let f = handle.require_f("--ytilde")?;
        for &v in &args.ytilde {
            columns.push((format!("F({v})"), f.cdf_batch(v, &x)?));
        }
    }
    if args.median {
        columns.push(("median".to_string(), q.quantile_batch(0.5, &x)?));
    }
    if args.mean {
        columns.push((
            "mean_trapz".to_string(),
            predict_mean(&DynQ(q.as_ref()), &x, args.n)?,
        ));
    }

    let mut header = feature_names;
    header.extend(columns.iter().map(|(name, _)| name.clone()));
    let d = x.cols();
    let rows = (0..x.rows()).map(|r| {
        let mut row: Vec<String> = x.data()[r * d..(r + 1) * d]
            .iter()
            .map(f64::to_string)
            .collect();
        row.extend(columns.iter().map(|(_, vals)| vals[r].to_string()));
        row
    });
    write_csv(args.out.as_deref(), &header, rows)
}
