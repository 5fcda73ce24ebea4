//! `ddr generate`: draw one of the synthetic families and write the dataset
//! with a sidecar recipe so evaluation can rebuild the exact oracle.

use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;

use ddr_core::data::{generate, SyntheticFamily, SyntheticSpec};

use crate::table::{stdout_line, suffixed, write_csv};
use crate::CliError;

fn parse_family(s: &str) -> Result<SyntheticFamily, String> {
    SyntheticFamily::from_str(s)
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Synthetic family: linear-constant, linear-linear, quad-linear,
    /// sin-constant
    #[arg(long, value_parser = parse_family)]
    family: SyntheticFamily,
    /// Number of rows to draw
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise scale sigma
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Output CSV; the oracle recipe lands beside it as <out>.oracle.json
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: GenerateArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        family: args.family,
        n: args.n,
        seed: args.seed,
        noise: args.noise,
    };
    let dataset = generate(&spec)?;

    let mut header: Vec<String> = dataset.columns.clone();
    header.push(dataset.target_name.clone());
    let x = dataset.features();
    let y = dataset.targets();
    let d = x.cols();
    let rows = (0..dataset.n_rows()).map(|r| {
        let mut row: Vec<String> = x.data()[r * d..(r + 1) * d]
            .iter()
            .map(f64::to_string)
            .collect();
        row.push(y[r].to_string());
        row
    });
    write_csv(Some(&args.out), &header, rows)?;

    let sidecar = suffixed(&args.out, "oracle.json");
    let mut text = serde_json::to_string_pretty(&spec)?;
    text.push('\n');
    fs::write(&sidecar, text).map_err(|e| CliError::Io {
        context: format!("writing {}", sidecar.display()),
        source: e,
    })?;

    stdout_line(&format!(
        "wrote {} ({} rows) and {}",
        args.out.display(),
        dataset.n_rows(),
        sidecar.display()
    ))
}
