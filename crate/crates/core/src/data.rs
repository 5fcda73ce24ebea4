//! Dataset ingestion, splits, standardization, and synthetic benchmarks.
//!
//! Standardization statistics come from the training split only; validation
//! and test rows are transformed with those statistics. Constant feature
//! columns are dropped rather than divided by zero.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::autodiff::tensor::{Tensor2, TensorError};
use crate::network::Standardization;
use crate::sampler::gather_rows;

const STREAM_SPLIT: u64 = 5;
const STREAM_GENERATE: u64 = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("target column {name:?} not found; columns are {available}")]
    MissingTarget { name: String, available: String },
    #[error("dataset needs at least one feature column besides the target")]
    NoFeatureColumns,
    #[error("no usable rows after rejection")]
    EmptyDataset,
    #[error("split fraction {0} is outside [0, 1)")]
    BadFraction(f64),
    #[error("splits leave no training rows")]
    NoTrainRows,
    #[error("splits must be assigned before standardization")]
    SplitsUnassigned,
    #[error("dataset is already standardized")]
    AlreadyStandardized,
    #[error("target is constant on the training split")]
    ConstantTarget,
    #[error("every feature column is constant on the training split")]
    AllFeaturesConstant,
    #[error("sample count must be positive")]
    EmptySample,
    #[error("noise scale must be positive, got {0}")]
    BadNoise(f64),
    #[error("tau {0} is outside (0, 1)")]
    TauOutOfRange(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub enum TargetSelector {
    LastColumn,
    Named(String),
}

/// Rows of features plus a scalar target, with optional split tags and
/// standardization state.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub target_name: String,
    features: Tensor2,
    targets: Vec<f64>,
    split: Vec<SplitTag>,
    splits_assigned: bool,
    stats: Option<Standardization>,
    dropped: Vec<String>,
}

impl Dataset {
    pub fn from_parts(
        columns: Vec<String>,
        target_name: String,
        features: Tensor2,
        targets: Vec<f64>,
    ) -> Result<Self, DataError> {
        if features.rows() == 0 {
            return Err(DataError::EmptyDataset);
        }
        if features.cols() == 0 || columns.len() != features.cols() {
            return Err(DataError::NoFeatureColumns);
        }
        debug_assert_eq!(features.rows(), targets.len());
        Ok(Self {
            columns,
            target_name,
            split: vec![SplitTag::Train; features.rows()],
            splits_assigned: false,
            features,
            targets,
            stats: None,
            dropped: Vec::new(),
        })
    }

    /// Load a headed numeric CSV. Rows with unparseable, non-finite, or
    /// missing values are skipped; the second return is how many.
    pub fn load_csv(path: &Path, target: &TargetSelector) -> Result<(Self, usize), DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)?;
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if headers.len() < 2 {
            return Err(DataError::NoFeatureColumns);
        }
        let target_idx = match target {
            TargetSelector::LastColumn => headers.len() - 1,
            TargetSelector::Named(name) => headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingTarget {
                    name: name.clone(),
                    available: headers.join(", "),
                })?,
        };
        let feature_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target_idx)
            .map(|(_, h)| h.clone())
            .collect();

        let mut rows: Vec<f64> = Vec::new();
        let mut targets = Vec::new();
        let mut rejected = 0usize;
        'records: for record in reader.records() {
            let record = match record {
                Ok(r) => r,
                Err(_) => {
                    rejected += 1;
                    continue;
                }
            };
            if record.len() != headers.len() {
                rejected += 1;
                continue;
            }
            let mut parsed = Vec::with_capacity(headers.len());
            for field in record.iter() {
                match field.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => parsed.push(v),
                    _ => {
                        rejected += 1;
                        continue 'records;
                    }
                }
            }
            targets.push(parsed[target_idx]);
            for (i, v) in parsed.into_iter().enumerate() {
                if i != target_idx {
                    rows.push(v);
                }
            }
        }
        if targets.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let features = Tensor2::new(targets.len(), feature_names.len(), rows)?;
        let dataset = Self::from_parts(
            feature_names,
            headers[target_idx].clone(),
            features,
            targets,
        )?;
        Ok((dataset, rejected))
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn stats(&self) -> Option<&Standardization> {
        self.stats.as_ref()
    }

    pub fn dropped_columns(&self) -> &[String] {
        &self.dropped
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for tag in &self.split {
            match tag {
                SplitTag::Train => counts.0 += 1,
                SplitTag::Val => counts.1 += 1,
                SplitTag::Test => counts.2 += 1,
            }
        }
        counts
    }

    /// Deterministically tag rows: `test_frac` of all rows to test, then
    /// `val_frac` of the remainder to validation, rest to training.
    pub fn assign_splits(
        &mut self,
        val_frac: f64,
        test_frac: f64,
        seed: u64,
    ) -> Result<(), DataError> {
        for f in [val_frac, test_frac] {
            if !(0.0..1.0).contains(&f) {
                return Err(DataError::BadFraction(f));
            }
        }
        let n = self.n_rows();
        let test_n = (n as f64 * test_frac).round() as usize;
        let val_n = ((n - test_n) as f64 * val_frac).round() as usize;
        if test_n + val_n >= n {
            return Err(DataError::NoTrainRows);
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_SPLIT);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for (pos, &row) in order.iter().enumerate() {
            self.split[row] = if pos < test_n {
                SplitTag::Test
            } else if pos < test_n + val_n {
                SplitTag::Val
            } else {
                SplitTag::Train
            };
        }
        self.splits_assigned = true;
        Ok(())
    }

    /// Standardize features and target in place with training-split
    /// statistics (population moments). Constant feature columns are removed
    /// and reported via [`Dataset::dropped_columns`].
    pub fn standardize(&mut self) -> Result<(), DataError> {
        if self.stats.is_some() {
            return Err(DataError::AlreadyStandardized);
        }
        if !self.splits_assigned {
            return Err(DataError::SplitsUnassigned);
        }
        let train_rows: Vec<usize> = (0..self.n_rows())
            .filter(|&i| self.split[i] == SplitTag::Train)
            .collect();
        if train_rows.is_empty() {
            return Err(DataError::NoTrainRows);
        }

        let d = self.n_features();
        let tn = train_rows.len() as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for &r in &train_rows {
            for c in 0..d {
                mean[c] += self.features.get(r, c).unwrap();
            }
        }
        for m in &mut mean {
            *m /= tn;
        }
        for &r in &train_rows {
            for c in 0..d {
                let delta = self.features.get(r, c).unwrap() - mean[c];
                var[c] += delta * delta;
            }
        }
        for v in &mut var {
            *v /= tn;
        }

        let keep: Vec<usize> = (0..d).filter(|&c| var[c] > 0.0).collect();
        if keep.is_empty() {
            return Err(DataError::AllFeaturesConstant);
        }
        self.dropped = (0..d)
            .filter(|c| !keep.contains(c))
            .map(|c| self.columns[c].clone())
            .collect();

        let x_mean: Vec<f64> = keep.iter().map(|&c| mean[c]).collect();
        let x_std: Vec<f64> = keep.iter().map(|&c| var[c].sqrt()).collect();
        let n = self.n_rows();
        let mut data = Vec::with_capacity(n * keep.len());
        for r in 0..n {
            for (k, &c) in keep.iter().enumerate() {
                data.push((self.features.get(r, c).unwrap() - x_mean[k]) / x_std[k]);
            }
        }
        self.features = Tensor2::new(n, keep.len(), data)?;
        self.columns = keep.iter().map(|&c| self.columns[c].clone()).collect();

        let y_mean = train_rows.iter().map(|&r| self.targets[r]).sum::<f64>() / tn;
        let y_var = train_rows
            .iter()
            .map(|&r| {
                let d = self.targets[r] - y_mean;
                d * d
            })
            .sum::<f64>()
            / tn;
        if y_var <= 0.0 {
            return Err(DataError::ConstantTarget);
        }
        let y_std = y_var.sqrt();
        for t in &mut self.targets {
            *t = (*t - y_mean) / y_std;
        }
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &r in &train_rows {
            y_min = y_min.min(self.targets[r]);
            y_max = y_max.max(self.targets[r]);
        }
        self.stats = Some(Standardization {
            x_mean,
            x_std,
            y_mean,
            y_std,
            y_min_std: y_min,
            y_max_std: y_max,
        });
        Ok(())
    }

    /// Features and targets of one split, in row order.
    pub fn rows_of(&self, tag: SplitTag) -> (Tensor2, Vec<f64>) {
        let idx: Vec<usize> = (0..self.n_rows())
            .filter(|&i| self.split[i] == tag)
            .collect();
        let y = idx.iter().map(|&i| self.targets[i]).collect();
        (gather_rows(&self.features, &idx), y)
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticFamily {
    LinearConstant,
    LinearLinear,
    QuadLinear,
    SinConstant,
}

impl SyntheticFamily {
    pub const ALL: [SyntheticFamily; 4] = [
        SyntheticFamily::LinearConstant,
        SyntheticFamily::LinearLinear,
        SyntheticFamily::QuadLinear,
        SyntheticFamily::SinConstant,
    ];

    fn location(self, x: f64) -> f64 {
        match self {
            SyntheticFamily::LinearConstant | SyntheticFamily::LinearLinear => 2.0 * x + 1.0,
            SyntheticFamily::QuadLinear => 2.0 * x * x - 1.0,
            SyntheticFamily::SinConstant => (2.0 * std::f64::consts::PI * x).sin(),
        }
    }

    fn scale(self, x: f64, noise: f64) -> f64 {
        match self {
            SyntheticFamily::LinearConstant | SyntheticFamily::SinConstant => noise,
            SyntheticFamily::LinearLinear | SyntheticFamily::QuadLinear => noise * (x + 1.5),
        }
    }
}

impl fmt::Display for SyntheticFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticFamily::LinearConstant => "linear-constant",
            SyntheticFamily::LinearLinear => "linear-linear",
            SyntheticFamily::QuadLinear => "quad-linear",
            SyntheticFamily::SinConstant => "sin-constant",
        })
    }
}

impl FromStr for SyntheticFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear-constant" => Ok(SyntheticFamily::LinearConstant),
            "linear-linear" => Ok(SyntheticFamily::LinearLinear),
            "quad-linear" => Ok(SyntheticFamily::QuadLinear),
            "sin-constant" => Ok(SyntheticFamily::SinConstant),
            other => Err(format!(
                "unknown family {other:?}; expected one of {}",
                SyntheticFamily::ALL.map(|f| f.to_string()).join(", ")
            )),
        }
    }
}

/// Recipe for a synthetic benchmark draw; serialized beside generated CSVs so
/// evaluation can reconstruct the oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: SyntheticFamily,
    pub n: usize,
    pub seed: u64,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(family: SyntheticFamily, n: usize, seed: u64) -> Self {
        Self {
            family,
            n,
            seed,
            noise: 0.3,
        }
    }

    pub fn oracle(&self) -> SyntheticOracle {
        SyntheticOracle {
            family: self.family,
            noise: self.noise,
        }
    }
}

/// Draw `x ~ U(-1, 1)` and `y = location(x) + scale(x) * eps`, gaussian noise.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.n == 0 {
        return Err(DataError::EmptySample);
    }
    if !(spec.noise > 0.0) {
        return Err(DataError::BadNoise(spec.noise));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_GENERATE);
    let mut xs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let eps: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(spec.family.location(x) + spec.family.scale(x, spec.noise) * eps);
    }
    Dataset::from_parts(
        vec!["x1".to_string()],
        "y".to_string(),
        Tensor2::from_column(&xs)?,
        ys,
    )
}

/// Closed-form conditional distribution of a synthetic family.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticOracle {
    pub family: SyntheticFamily,
    pub noise: f64,
}

impl SyntheticOracle {
    pub fn quantile(&self, tau: f64, x: f64) -> Result<f64, DataError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(DataError::TauOutOfRange(tau));
        }
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(tau);
        Ok(self.family.location(x) + self.family.scale(x, self.noise) * z)
    }

    pub fn cdf(&self, y: f64, x: f64) -> f64 {
        let z = (y - self.family.location(x)) / self.family.scale(x, self.noise);
        Normal::new(0.0, 1.0).unwrap().cdf(z)
    }

    pub fn mean(&self, x: f64) -> f64 {
        self.family.location(x)
    }
}

/// Lower empirical quantile of a sorted sample: the order statistic at
/// `ceil(n tau)`.
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> Result<f64, DataError> {
    if sorted.is_empty() {
        return Err(DataError::EmptySample);
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(DataError::TauOutOfRange(tau));
    }
    let k = ((sorted.len() as f64 * tau).ceil() as usize).max(1) - 1;
    Ok(sorted[k.min(sorted.len() - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use statrs::distribution::Continuous;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_loads_and_rejects_bad_rows() {
        let f = write_csv(
            "a,b,y\n1.0,2.0,3.0\nbad,2.0,3.0\n4.0,5.0,6.0\n1.0,2.0\n7.0,inf,9.0\n 8.0 ,9.0,10.0\n",
        );
        let (ds, rejected) = Dataset::load_csv(f.path(), &TargetSelector::LastColumn).unwrap();
        assert_eq!(rejected, 3);
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.columns, vec!["a", "b"]);
        assert_eq!(ds.target_name, "y");
        assert_eq!(ds.targets(), &[3.0, 6.0, 10.0]);
        assert_eq!(ds.features().get(2, 0).unwrap(), 8.0);
    }

    #[test]
    fn csv_named_target_and_errors() {
        let f = write_csv("a,b,y\n1.0,2.0,3.0\n4.0,5.0,6.0\n");
        let (ds, _) =
            Dataset::load_csv(f.path(), &TargetSelector::Named("a".to_string())).unwrap();
        assert_eq!(ds.target_name, "a");
        assert_eq!(ds.columns, vec!["b", "y"]);
        assert_eq!(ds.targets(), &[1.0, 4.0]);

        let err =
            Dataset::load_csv(f.path(), &TargetSelector::Named("nope".to_string())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nope") && msg.contains("a, b, y"), "{msg}");

        let empty = write_csv("a,b,y\nx,x,x\n");
        assert!(matches!(
            Dataset::load_csv(empty.path(), &TargetSelector::LastColumn),
            Err(DataError::EmptyDataset)
        ));
    }

    #[test]
    fn splits_partition_and_are_deterministic() {
        let mut spec = SyntheticSpec::new(SyntheticFamily::LinearConstant, 1000, 4);
        spec.noise = 0.5;
        let mut ds = generate(&spec).unwrap();
        ds.assign_splits(0.2, 0.1, 7).unwrap();
        let (train, val, test) = ds.split_counts();
        assert_eq!(train + val + test, 1000);
        assert_eq!(test, 100);
        assert_eq!(val, 180);

        let mut ds2 = generate(&spec).unwrap();
        ds2.assign_splits(0.2, 0.1, 7).unwrap();
        assert_eq!(ds.rows_of(SplitTag::Val).1, ds2.rows_of(SplitTag::Val).1);

        let mut ds3 = generate(&spec).unwrap();
        ds3.assign_splits(0.2, 0.1, 8).unwrap();
        assert_ne!(ds.rows_of(SplitTag::Val).1, ds3.rows_of(SplitTag::Val).1);

        assert!(matches!(
            ds.assign_splits(1.5, 0.1, 1),
            Err(DataError::BadFraction(_))
        ));
        assert!(matches!(
            ds.assign_splits(0.99, 0.99, 1),
            Err(DataError::NoTrainRows)
        ));
    }

    #[test]
    fn standardize_uses_train_statistics_only() {
        // two features, one constant; fixed values so moments are easy
        let features = Tensor2::from_rows(&[
            vec![1.0, 5.0],
            vec![2.0, 5.0],
            vec![3.0, 5.0],
            vec![4.0, 5.0],
            vec![100.0, 5.0],
        ])
        .unwrap();
        let targets = vec![10.0, 20.0, 30.0, 40.0, 1000.0];
        let mut ds = Dataset::from_parts(
            vec!["a".into(), "c".into()],
            "y".into(),
            features,
            targets,
        )
        .unwrap();
        // pin the split by hand: rows 0..4 train, row 4 val
        ds.split = vec![
            SplitTag::Train,
            SplitTag::Train,
            SplitTag::Train,
            SplitTag::Train,
            SplitTag::Val,
        ];
        ds.splits_assigned = true;
        ds.standardize().unwrap();
        assert_eq!(ds.dropped_columns(), &["c".to_string()]);
        assert_eq!(ds.n_features(), 1);

        let stats = ds.stats().unwrap().clone();
        assert!((stats.x_mean[0] - 2.5).abs() < 1e-12);
        // population std of {1,2,3,4}
        assert!((stats.x_std[0] - 1.118033988749895).abs() < 1e-12);
        assert!((stats.y_mean - 25.0).abs() < 1e-12);

        let (train_x, train_y) = ds.rows_of(SplitTag::Train);
        let mean: f64 = train_x.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let ymean: f64 = train_y.iter().sum::<f64>() / 4.0;
        assert!(ymean.abs() < 1e-12);

        // val row transformed with train stats, far outside train bounds
        let (val_x, val_y) = ds.rows_of(SplitTag::Val);
        assert!((val_x.get(0, 0).unwrap() - (100.0 - 2.5) / stats.x_std[0]).abs() < 1e-12);
        assert!(val_y[0] > stats.y_max_std);

        // train target bounds are the standardized extremes
        let min = train_y.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = train_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(stats.y_min_std, min);
        assert_eq!(stats.y_max_std, max);

        assert!(matches!(
            ds.standardize(),
            Err(DataError::AlreadyStandardized)
        ));
    }

    #[test]
    fn generators_are_deterministic_and_bounded() {
        let spec = SyntheticSpec::new(SyntheticFamily::QuadLinear, 500, 11);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.targets(), b.targets());
        assert_eq!(a.features().data(), b.features().data());
        assert!(a.features().data().iter().all(|&x| (-1.0..1.0).contains(&x)));

        let other = generate(&SyntheticSpec::new(SyntheticFamily::QuadLinear, 500, 12)).unwrap();
        assert_ne!(a.targets(), other.targets());
    }

    #[test]
    fn generated_residuals_match_the_oracle_distribution() {
        // standardized residuals (y - location) / scale are standard normal;
        // empirical deciles must sit within 4 standard errors of the exact
        // normal quantiles
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 50_000;
        for family in SyntheticFamily::ALL {
            let spec = SyntheticSpec::new(family, n, 99);
            let ds = generate(&spec).unwrap();
            let mut residuals: Vec<f64> = ds
                .targets()
                .iter()
                .zip(ds.features().data())
                .map(|(&y, &x)| (y - family.location(x)) / family.scale(x, spec.noise))
                .collect();
            residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for tau in crate::sampler::DECILES {
                let z = normal.inverse_cdf(tau);
                let se = (tau * (1.0 - tau) / n as f64).sqrt() / normal.pdf(z);
                let emp = empirical_quantile(&residuals, tau).unwrap();
                assert!(
                    (emp - z).abs() <= 4.0 * se,
                    "{family} tau {tau}: {emp} vs {z} (se {se})"
                );
            }
        }
    }

    #[test]
    fn oracle_quantiles_are_exact_normal_transforms() {
        let oracle = SyntheticOracle {
            family: SyntheticFamily::LinearLinear,
            noise: 0.3,
        };
        let x = 0.25;
        // median equals the location exactly
        assert!((oracle.quantile(0.5, x).unwrap() - (2.0 * x + 1.0)).abs() < 1e-9);
        // monotone in tau
        let qs: Vec<f64> = crate::sampler::DECILES
            .iter()
            .map(|&t| oracle.quantile(t, x).unwrap())
            .collect();
        assert!(qs.windows(2).all(|w| w[0] < w[1]));
        // known normal quantile: z_{0.9} of the scaled noise
        let expect = 2.0 * x + 1.0 + 0.3 * (x + 1.5) * 1.2815515655446004;
        assert!((oracle.quantile(0.9, x).unwrap() - expect).abs() < 1e-9);
        // cdf inverts quantile
        let q = oracle.quantile(0.7, x).unwrap();
        assert!((oracle.cdf(q, x) - 0.7).abs() < 1e-9);

        assert!(oracle.quantile(0.0, x).is_err());
    }

    #[test]
    fn empirical_quantile_picks_lower_order_statistic() {
        let sorted = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(empirical_quantile(&sorted, 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&sorted, 0.51).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&sorted, 0.95).unwrap(), 4.0);
        assert_eq!(empirical_quantile(&sorted, 0.01).unwrap(), 1.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
    }
}
