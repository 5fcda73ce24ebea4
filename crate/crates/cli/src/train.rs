//! `ddr train`: split, standardize, fit, and write the model with its run
//! log and per-epoch table. `--seeds` runs independent replicates (split,
//! init, and sampling all keyed to the replicate seed); `--jobs` bounds how
//! many run at once.

use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::thread;

use clap::Args;

use ddr_core::data::{Dataset, SplitTag, TargetSelector};
use ddr_core::network::{ArchSpec, FcnnKind};
use ddr_core::training::{train, TrainMode, TrainOutcome, TrainReport};
use ddr_core::TrainConfig;

use crate::model::DECILE_SUFFIXES;
use crate::table::{stdout_line, suffixed, write_csv};
use crate::CliError;

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    TrainMode::from_str(s)
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training CSV with a target column
    #[arg(long)]
    data: PathBuf,
    /// Model output path; the run log and epoch table append .log.json and
    /// .epochs.csv, fcnn mode appends .q10 .. .q90
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override file values, file values override
    /// defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// ddr-joint, ddr-disjoint, ddr-q, fcnn, or fcnn-joint
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    /// Target column name; defaults to the last column
    #[arg(long)]
    target: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated replicate seeds; artifacts gain a .s<seed> suffix
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Validation fraction of the non-test rows
    #[arg(long)]
    val_frac: Option<f64>,
    /// Fraction of rows held out before training, untouched by
    /// standardization
    #[arg(long, default_value_t = 0.0)]
    test_frac: f64,
    /// Where to write the held-out rows when --test-frac is positive
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Replicates trained concurrently
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let (cfg, arch_pinned) = build_config(&args)?;

    let target = match &args.target {
        Some(name) => TargetSelector::Named(name.clone()),
        None => TargetSelector::LastColumn,
    };
    let (raw, skipped) = Dataset::load_csv(&args.data, &target)?;
    if skipped > 0 {
        eprintln!("ddr: note: skipped {skipped} unusable rows in {}", args.data.display());
    }

    let seeds: Vec<u64> = if args.seeds.is_empty() {
        vec![args.seed.unwrap_or(cfg.seed)]
    } else {
        args.seeds.clone()
    };
    let multi = seeds.len() > 1;
    let jobs = args.jobs.max(1);

    let mut messages: Vec<Option<String>> = (0..seeds.len()).map(|_| None).collect();
    for chunk in (0..seeds.len()).collect::<Vec<_>>().chunks(jobs) {
        let mut outcomes = Vec::with_capacity(chunk.len());
        thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let (raw, cfg, args) = (&raw, &cfg, &args);
                    let seed = seeds[i];
                    (i, scope.spawn(move || run_one(raw, cfg, args, arch_pinned, seed, multi)))
                })
                .collect();
            for (i, handle) in handles {
                let result = handle
                    .join()
                    .unwrap_or_else(|_| Err(CliError::msg("training thread panicked")));
                outcomes.push((i, result));
            }
        });
        for (i, result) in outcomes {
            messages[i] = Some(result?);
        }
    }
    for message in messages.into_iter().flatten() {
        stdout_line(&message)?;
    }
    Ok(())
}

fn build_config(args: &TrainArgs) -> Result<(TrainConfig, bool), CliError> {
    let (mut cfg, arch_pinned) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io {
                context: format!("reading {}", path.display()),
                source: e,
            })?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let pinned = value.get("arch").is_some();
            (serde_json::from_value::<TrainConfig>(value)?, pinned)
        }
        None => (TrainConfig::default(), false),
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(patience) = args.patience {
        cfg.patience = patience;
    }
    if let Some(frac) = args.val_frac {
        cfg.val_fraction = frac;
    }
    Ok((cfg, arch_pinned))
}

fn run_one(
    raw: &Dataset,
    cfg: &TrainConfig,
    args: &TrainArgs,
    arch_pinned: bool,
    seed: u64,
    multi: bool,
) -> Result<String, CliError> {
    let base = if multi {
        suffixed(&args.out, &format!("s{seed}"))
    } else {
        args.out.clone()
    };
    let mut cfg = cfg.clone();
    cfg.seed = seed;

    let mut ds = raw.clone();
    ds.assign_splits(cfg.val_fraction, args.test_frac, seed)?;
    if args.test_frac > 0.0 {
        if let Some(test_out) = &args.test_out {
            let path = if multi {
                suffixed(test_out, &format!("s{seed}"))
            } else {
                test_out.clone()
            };
            export_split(&ds, SplitTag::Test, &path)?;
        }
    }
    ds.standardize()?;
    if !ds.dropped_columns().is_empty() {
        eprintln!(
            "ddr: note: dropped constant feature columns: {}",
            ds.dropped_columns().join(", ")
        );
    }
    if !arch_pinned {
        cfg.arch = ArchSpec::default_ddr(ds.n_features());
    }

    let (outcome, report) = train(&ds, &cfg)?;

    let model_note = match outcome {
        TrainOutcome::Ddr(model) => {
            model.save(&base)?;
            base.display().to_string()
        }
        TrainOutcome::FcnnJoint(model) => {
            model.save(&base, FcnnKind::Joint)?;
            base.display().to_string()
        }
        TrainOutcome::Fcnn(models) => {
            for (model, suffix) in models.iter().zip(DECILE_SUFFIXES) {
                model.save(&suffixed(&base, suffix), FcnnKind::Separate)?;
            }
            format!("{}.q10 .. .q90", base.display())
        }
    };

    let log_path = suffixed(&base, "log.json");
    let mut log = serde_json::to_string_pretty(&report)?;
    log.push('\n');
    fs::write(&log_path, log).map_err(|e| CliError::Io {
        context: format!("writing {}", log_path.display()),
        source: e,
    })?;
    write_epochs(&report, &suffixed(&base, "epochs.csv"))?;

    Ok(format!(
        "seed {seed}: {} best val qs {:.6} (epochs {:?}); wrote {model_note}, {}.log.json, {}.epochs.csv",
        cfg.mode,
        report.best_val_qs,
        report.selected_epochs,
        base.display(),
        base.display()
    ))
}

fn export_split(ds: &Dataset, tag: SplitTag, path: &std::path::Path) -> Result<(), CliError> {
    let mut header = ds.columns.clone();
    header.push(ds.target_name.clone());
    let (x, y) = ds.rows_of(tag);
    let d = x.cols();
    let rows = (0..x.rows()).map(|r| {
        let mut row: Vec<String> = x.data()[r * d..(r + 1) * d]
            .iter()
            .map(f64::to_string)
            .collect();
        row.push(y[r].to_string());
        row
    });
    write_csv(Some(path), &header, rows)
}

fn write_epochs(report: &TrainReport, path: &std::path::Path) -> Result<(), CliError> {
    let header: Vec<String> = [
        "net",
        "epoch",
        "train_total",
        "qs",
        "mae",
        "mse",
        "crossing_rate",
        "recover_q",
        "recover_f",
    ]
    .map(String::from)
    .to_vec();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let rows = report.val.iter().map(|e| {
        vec![
            e.net.to_string(),
            e.epoch.to_string(),
            e.train_total.to_string(),
            e.qs.to_string(),
            opt(e.mae),
            opt(e.mse),
            opt(e.crossing_rate),
            opt(e.recover_q),
            opt(e.recover_f),
        ]
    });
    write_csv(Some(path), &header, rows)
}
