//! CSV and console plumbing shared by the commands.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ddr_core::Tensor2;

use crate::CliError;

/// Print a line to stdout, reporting failures (a closed pipe) as errors
/// instead of panicking like `println!`.
pub fn stdout_line(text: &str) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|()| out.write_all(b"\n"))
        .map_err(|e| CliError::Io {
            context: "stdout".to_string(),
            source: e,
        })
}

/// `base` with an extra dot-separated suffix appended, never replacing an
/// existing extension: `m.ddr` + `log.json` is `m.ddr.log.json`.
pub fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut os = base.as_os_str().to_os_string();
    os.push(".");
    os.push(suffix);
    PathBuf::from(os)
}

/// Column label for a percentile: `q10` for 0.1, `q2.5` for 0.025.
pub fn tau_column(tau: f64) -> String {
    let pct = tau * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("q{:.0}", pct)
    } else {
        format!("q{pct}")
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Write one CSV table to `out`, or stdout when no path is given.
pub fn write_csv(
    out: Option<&Path>,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(File::create(path).map_err(|e| CliError::Io {
            context: format!("creating {}", path.display()),
            source: e,
        })?),
        None => Box::new(io::stdout().lock()),
    };
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| CliError::Io {
        context: "flushing csv output".to_string(),
        source: e,
    })
}

/// Read a feature matrix for prediction: a headed numeric CSV whose columns
/// are the model inputs. A target column, if present (named via `target` or
/// detected as one surplus trailing column), is dropped. Rows with
/// unparseable or non-finite cells are skipped; the last return is how many.
pub fn load_features(
    path: &Path,
    input_dim: usize,
    target: Option<&str>,
) -> Result<(Tensor2, Vec<String>, usize), CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(CliError::Csv)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let drop_col = match target {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| {
                    CliError::msg(format!(
                        "no column {name:?} in {}; columns are {}",
                        path.display(),
                        header.join(", ")
                    ))
                })?,
        ),
        None if header.len() == input_dim + 1 => Some(header.len() - 1),
        None => None,
    };
    let kept: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != drop_col)
        .map(|(_, h)| h.clone())
        .collect();
    if kept.len() != input_dim {
        return Err(CliError::msg(format!(
            "{} has {} feature columns, model expects {input_dim}",
            path.display(),
            kept.len()
        )));
    }

    let mut data = Vec::new();
    let mut rows = 0usize;
    let mut skipped = 0usize;
    'records: for record in reader.records() {
        let record = record?;
        let mut row = Vec::with_capacity(input_dim);
        for (i, cell) in record.iter().enumerate() {
            if Some(i) == drop_col {
                continue;
            }
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    skipped += 1;
                    continue 'records;
                }
            }
        }
        if row.len() != input_dim {
            skipped += 1;
            continue;
        }
        data.extend(row);
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::msg(format!(
            "no usable rows in {}",
            path.display()
        )));
    }
    let x = Tensor2::new(rows, input_dim, data).map_err(|e| CliError::Model(e.into()))?;
    Ok((x, kept, skipped))
}
