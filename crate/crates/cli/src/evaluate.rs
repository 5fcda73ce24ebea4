//! `ddr evaluate`: score a trained model on a labelled CSV in original data
//! units. With an oracle sidecar the report also carries the gap to the true
//! quantiles. Fixed-percentile baselines are scored for crossings on their
//! own percentiles instead of the dense grid.

use std::fs;
use std::path::PathBuf;

use clap::Args;

use ddr_core::data::{Dataset, SyntheticSpec, TargetSelector};
use ddr_core::metrics::{eval_report_with_grid, crossing_grid, EvalReport, CROSSING_GRID_LEN};
use ddr_core::network::{CdfPredictor, OrigSpace};

use crate::model::{parse_infer_mode, DualSpace, InferMode, ModelHandle};
use crate::table::{stdout_line, write_csv};
use crate::CliError;

#[derive(Args)]
pub struct EvaluateArgs {
    /// Trained model path (for fcnn, the base path of the .q10 .. .q90 family)
    #[arg(long)]
    model: PathBuf,
    /// Labelled CSV to score on
    #[arg(long)]
    data: PathBuf,
    /// Target column name; defaults to the last column
    #[arg(long)]
    target: Option<String>,
    /// Oracle sidecar written by `generate`; adds the oracle-gap section
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// direct or dual
    #[arg(long, default_value = "direct", value_parser = parse_infer_mode)]
    mode: InferMode,
    /// Blend weight for dual mode: 1 is Q-direct, 0 is F-inverted
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Bisection tolerance for dual mode
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Report JSON path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the report as a one-row CSV table
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn run(args: EvaluateArgs) -> Result<(), CliError> {
    let handle = ModelHandle::load(&args.model)?;
    let target = match &args.target {
        Some(name) => TargetSelector::Named(name.clone()),
        None => TargetSelector::LastColumn,
    };
    let (ds, skipped) = Dataset::load_csv(&args.data, &target)?;
    if skipped > 0 {
        eprintln!("ddr: note: skipped {skipped} unusable rows in {}", args.data.display());
    }
    if ds.n_features() != handle.input_dim() {
        return Err(CliError::msg(format!(
            "{} has {} feature columns, model expects {}",
            args.data.display(),
            ds.n_features(),
            handle.input_dim()
        )));
    }
    let x = ds.features();
    let y = ds.targets();

    let oracle_fn: Option<Box<dyn Fn(f64, &[f64]) -> f64>> = match &args.oracle {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io {
                context: format!("reading {}", path.display()),
                source: e,
            })?;
            let spec: SyntheticSpec = serde_json::from_str(&text)?;
            if handle.input_dim() != 1 {
                return Err(CliError::msg(
                    "oracle sidecars describe single-feature synthetic data",
                ));
            }
            let oracle = spec.oracle();
            Some(Box::new(move |tau: f64, row: &[f64]| {
                oracle.quantile(tau, row[0]).expect("metric taus lie inside (0, 1)")
            }))
        }
        None => None,
    };
    let oracle_ref = oracle_fn.as_deref();

    let report: EvalReport = match (&handle, args.mode) {
        (ModelHandle::Ddr(m), InferMode::Direct) => {
            let q = OrigSpace(m);
            let f = OrigSpace(m);
            let f_opt: Option<&dyn CdfPredictor> =
                if m.trained_heads.f { Some(&f) } else { None };
            eval_report_with_grid(
                &q,
                f_opt,
                x,
                y,
                "original",
                oracle_ref,
                &crossing_grid(CROSSING_GRID_LEN),
            )?
        }
        (ModelHandle::Ddr(m), InferMode::Dual) => {
            let q = DualSpace::new(m, args.alpha, args.tol)?;
            let f = OrigSpace(m);
            eval_report_with_grid(
                &q,
                Some(&f),
                x,
                y,
                "original",
                oracle_ref,
                &crossing_grid(CROSSING_GRID_LEN),
            )?
        }
        (ModelHandle::Fcnn(_), InferMode::Dual) => {
            return Err(CliError::msg(
                "dual inference requires a trained F head; this model was trained without one",
            ));
        }
        (ModelHandle::Fcnn(e), InferMode::Direct) => {
            let q = e.orig_space();
            let grid = handle.fixed_taus().expect("fcnn handles carry percentiles");
            eval_report_with_grid(&q, None, x, y, "original", oracle_ref, &grid)?
        }
    };

    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            fs::write(path, json + "\n").map_err(|e| CliError::Io {
                context: format!("writing {}", path.display()),
                source: e,
            })?;
            stdout_line(&format!("wrote {}", path.display()))?;
        }
        None => stdout_line(&json)?,
    }
    if let Some(path) = &args.csv {
        write_csv(
            Some(path),
            &EvalReport::csv_header(),
            std::iter::once(report.csv_record()),
        )?;
    }
    Ok(())
}
