//! Datasets: CSV ingestion, standardization, train/test splits and the sinc
//! toy generator.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};

/// Training or test data: `n x d` inputs and `n` targets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    /// Standardization statistics of the training set, if the data has been
    /// mapped through them.
    pub norm_stats: Option<NormStats>,
}

/// Per-column standardization statistics, computed on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Indices of the raw input columns that were kept (constant ones dropped).
    pub kept_columns: Vec<usize>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|i| format!("x{i}")).collect();
        Self::with_names(x, y, names)
    }

    pub fn with_names(x: DMatrix<f64>, y: DVector<f64>, feature_names: Vec<String>) -> Result<Self> {
        check_dim("dataset: targets vs input rows", x.nrows(), y.len())?;
        check_dim("dataset: feature names", x.ncols(), feature_names.len())?;
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(GpError::invalid("dataset needs n >= 1 and d >= 1"));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(GpError::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset {
            x,
            y,
            feature_names,
            norm_stats: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = self.x.select_rows(idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        Dataset {
            x,
            y,
            feature_names: self.feature_names.clone(),
            norm_stats: self.norm_stats.clone(),
        }
    }

    /// Sample variance of the targets (n - 1 denominator).
    pub fn target_var(&self) -> f64 {
        sample_var(self.y.as_slice())
    }

    pub fn target_mean(&self) -> f64 {
        self.y.mean()
    }
}

fn sample_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = sample_mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

impl NormStats {
    /// Computes statistics from raw training data. Constant input columns are
    /// dropped with a warning; a constant target is an error.
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.n() < 2 {
            return Err(GpError::invalid("normalization needs at least 2 rows"));
        }
        let y_std = sample_var(data.y.as_slice()).sqrt();
        if y_std <= 0.0 || !y_std.is_finite() {
            return Err(GpError::invalid("target has zero variance"));
        }
        let mut kept = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for c in 0..data.d() {
            let col: Vec<f64> = data.x.column(c).iter().copied().collect();
            let s = sample_var(&col).sqrt();
            if s > 0.0 {
                kept.push(c);
                means.push(sample_mean(&col));
                stds.push(s);
            } else {
                log::warn!("dropping constant input column `{}`", data.feature_names[c]);
            }
        }
        if kept.is_empty() {
            return Err(GpError::invalid("every input column is constant"));
        }
        Ok(NormStats {
            kept_columns: kept,
            x_mean: means,
            x_std: stds,
            y_mean: sample_mean(data.y.as_slice()),
            y_std,
        })
    }

    /// Maps raw inputs (all original columns) to standardized inputs.
    pub fn transform_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let sel = x.select_columns(&self.kept_columns);
        DMatrix::from_fn(sel.nrows(), sel.ncols(), |i, j| {
            (sel[(i, j)] - self.x_mean[j]) / self.x_std[j]
        })
    }

    pub fn transform_targets(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    /// Applies the statistics to a raw dataset.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        Dataset {
            x: self.transform_inputs(&data.x),
            y: self.transform_targets(&data.y),
            feature_names: self
                .kept_columns
                .iter()
                .map(|&c| data.feature_names[c].clone())
                .collect(),
            norm_stats: Some(self.clone()),
        }
    }

    pub fn denormalize_mean(&self, mu: f64) -> f64 {
        mu * self.y_std + self.y_mean
    }

    pub fn denormalize_var(&self, var: f64) -> f64 {
        var * self.y_std * self.y_std
    }
}

/// Standardizes every input column and the target to zero mean and unit
/// sample standard deviation, keeping the statistics on the result.
pub fn normalize(data: &Dataset) -> Result<Dataset> {
    let stats = NormStats::fit(data)?;
    Ok(stats.apply(data))
}

/// Reads a numeric CSV with a header row; `target_column` becomes `y` and the
/// remaining columns, in file order, become `X`.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_reader(file, target_column)
}

pub fn load_csv_reader<R: Read>(reader: R, target_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let target = headers.iter().position(|h| h == target_column).ok_or_else(|| {
        GpError::config("target", format!("target column `{target_column}` not found in header {headers:?}"))
    })?;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(GpError::Parse {
                row: r + 2,
                column: rec.len(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| GpError::Parse {
                row: r + 2,
                column: c + 1,
                message: format!("non-numeric cell `{field}`"),
            })?;
            if c == target {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
        n += 1;
    }
    if n < 2 {
        return Err(GpError::invalid(format!("CSV has {n} data rows; at least 2 required")));
    }
    let d = headers.len() - 1;
    let names = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, h)| h.clone())
        .collect();
    Dataset::with_names(DMatrix::from_row_slice(n, d, &xs), DVector::from_vec(ys), names)
}

/// Writes `data` with a header of its feature names, then `target_name`,
/// then one column per entry of `extra`.
pub fn write_csv(
    path: impl AsRef<Path>,
    data: &Dataset,
    target_name: &str,
    extra: &[(&str, &DVector<f64>)],
) -> Result<()> {
    for (_, col) in extra {
        check_dim("write_csv extra column", data.n(), col.len())?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = data.feature_names.clone();
    header.push(target_name.to_string());
    header.extend(extra.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut row: Vec<String> = data.x.row(i).iter().map(f64::to_string).collect();
        row.push(data.y[i].to_string());
        row.extend(extra.iter().map(|(_, c)| c[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Row indices of a seeded random split: `(train, test)`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(GpError::config("test_fraction", format!("must lie in (0, 1), got {test_fraction}")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(GpError::invalid(format!(
            "split of n = {n} with fraction {test_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    Ok((train, test))
}

/// Seeded random train/test split of raw data. Normalization statistics
/// should be fitted on the returned training part only.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(data.n(), test_fraction, seed)?;
    Ok((data.subset(&tr), data.subset(&te)))
}

/// Normalized sinc, `sin(pi x) / (pi x)` with value 1 at the origin.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Settings for the 1-D sinc toy problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SincSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub train_range: (f64, f64),
    pub test_range: (f64, f64),
    pub noise_var: f64,
}

impl Default for SincSpec {
    fn default() -> Self {
        SincSpec {
            n_train: 120,
            n_test: 300,
            train_range: (-4.0, 4.0),
            test_range: (-7.0, 7.0),
            noise_var: 0.04,
        }
    }
}

/// Raw (unnormalized) sinc toy data.
#[derive(Clone, Debug)]
pub struct SincData {
    pub train: Dataset,
    /// Test inputs with noisy targets.
    pub test: Dataset,
    /// Noise-free targets at the test inputs.
    pub test_clean: DVector<f64>,
}

/// Draws `n_train` uniform inputs on the training range with noisy sinc
/// targets, and `n_test` equally spaced test inputs on the test range.
pub fn generate_sinc(spec: &SincSpec, seed: u64) -> Result<SincData> {
    let (a, b) = spec.train_range;
    let (ta, tb) = spec.test_range;
    if !(a < b && ta < tb) || spec.noise_var < 0.0 || spec.n_train == 0 || spec.n_test == 0 {
        return Err(GpError::invalid(format!("invalid sinc spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_var.sqrt()).map_err(|e| GpError::invalid(e.to_string()))?;
    let xtr: Vec<f64> = (0..spec.n_train).map(|_| rng.random_range(a..b)).collect();
    let ytr: Vec<f64> = xtr.iter().map(|&x| sinc(x) + noise.sample(&mut rng)).collect();
    let xte: Vec<f64> = if spec.n_test == 1 {
        vec![0.5 * (ta + tb)]
    } else {
        (0..spec.n_test)
            .map(|i| ta + (tb - ta) * i as f64 / (spec.n_test - 1) as f64)
            .collect()
    };
    let clean: Vec<f64> = xte.iter().map(|&x| sinc(x)).collect();
    let noisy: Vec<f64> = clean.iter().map(|&v| v + noise.sample(&mut rng)).collect();
    let names = vec!["x".to_string()];
    Ok(SincData {
        train: Dataset::with_names(
            DMatrix::from_column_slice(spec.n_train, 1, &xtr),
            DVector::from_vec(ytr),
            names.clone(),
        )?,
        test: Dataset::with_names(
            DMatrix::from_column_slice(spec.n_test, 1, &xte),
            DVector::from_vec(noisy),
            names,
        )?,
        test_clean: DVector::from_vec(clean),
    })
}

/// Smooth synthetic regression data on `[-1, 1]^d` with Gaussian noise,
/// used where a real dataset of a given shape is not available.
///
/// `y = sum_j sin(2 w_j x_j) + 0.5 x_0 x_1 + noise` with fixed weights
/// `w_j = 1 + j / d`.
pub fn generate_smooth(n: usize, d: usize, noise_var: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || d == 0 || !(noise_var >= 0.0) {
        return Err(GpError::invalid("synthetic data needs n >= 2, d >= 1, noise_var >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| GpError::invalid(e.to_string()))?;
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(n, |i, _| {
        let mut v: f64 = (0..d).map(|j| (2.0 * (1.0 + j as f64 / d as f64) * x[(i, j)]).sin()).sum();
        if d > 1 {
            v += 0.5 * x[(i, 0)] * x[(i, 1)];
        }
        v
    });
    let y = y.map(|v| v + noise.sample(&mut rng));
    Dataset::new(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn csv_three_rows() {
        let s = "a,b,t\n1,2,3\n4,5,6\n7,8,9\n";
        let d = load_csv_reader(s.as_bytes(), "t").unwrap();
        assert_eq!((d.n(), d.d()), (3, 2));
        assert_eq!(d.y.as_slice(), &[3.0, 6.0, 9.0]);
        assert_eq!(d.x[(2, 1)], 8.0);
        assert_eq!(d.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn csv_missing_target_names_column() {
        let s = "a,b,t\n1,2,3\n4,5,6\n";
        let err = load_csv_reader(s.as_bytes(), "y").unwrap_err();
        assert!(err.to_string().contains("`y`"), "{err}");
    }

    #[test]
    fn csv_non_numeric_reports_position() {
        let s = "a,t\n1,2\n3,oops\n";
        match load_csv_reader(s.as_bytes(), "t").unwrap_err() {
            GpError::Parse { row, column, .. } => assert_eq!((row, column), (3, 2)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn csv_too_few_rows() {
        assert!(load_csv_reader("a,t\n1,2\n".as_bytes(), "t").is_err());
    }

    #[test]
    fn two_point_standardization() {
        let d = Dataset::new(DMatrix::from_column_slice(2, 1, &[1.0, 5.0]), DVector::from_vec(vec![0.0, 2.0])).unwrap();
        let n = normalize(&d).unwrap();
        assert_relative_eq!(n.y[0], -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(n.y[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn standardized_column_is_unchanged() {
        let x = [-1.0, 0.0, 1.0];
        let d = Dataset::new(DMatrix::from_column_slice(3, 1, &x), DVector::from_vec(x.to_vec())).unwrap();
        let n = normalize(&d).unwrap();
        for i in 0..3 {
            assert!((n.x[(i, 0)] - x[i]).abs() < 1e-12);
            assert!((n.y[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_dropped_constant_target_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 7.0, 2.0, 7.0, 3.0, 7.0]);
        let d = Dataset::new(x.clone(), DVector::from_vec(vec![1.0, 2.0, 4.0])).unwrap();
        let n = normalize(&d).unwrap();
        assert_eq!(n.d(), 1);
        assert_eq!(n.norm_stats.unwrap().kept_columns, vec![0]);
        let c = Dataset::new(x, DVector::from_element(3, 2.0)).unwrap();
        assert!(normalize(&c).is_err());
    }

    #[test]
    fn random_data_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(50, 3, |_, j| rng.random_range(-5.0..5.0) * (j + 1) as f64 + 10.0);
        let y = DVector::from_fn(50, |_, _| rng.random_range(0.0..100.0));
        let n = normalize(&Dataset::new(x, y).unwrap()).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = n.x.column(c).iter().copied().collect();
            assert!(sample_mean(&col).abs() < 1e-10);
            assert!((sample_var(&col).sqrt() - 1.0).abs() < 1e-10);
        }
        assert!(n.y.mean().abs() < 1e-10);
        assert!((sample_var(n.y.as_slice()).sqrt() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn split_sizes_and_partition() {
        let (tr, te) = split_indices(10, 0.3, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.3, 4).unwrap(), (tr, te));
        assert!(split_indices(10, 0.0, 1).is_err());
        assert!(split_indices(10, 1.0, 1).is_err());
        assert!(split_indices(3, 0.01, 1).is_err());
    }

    #[test]
    fn sinc_defaults_and_determinism() {
        assert_eq!(sinc(0.0), 1.0);
        assert!(sinc(1.0).abs() < 1e-15);
        let s = generate_sinc(&SincSpec::default(), 9).unwrap();
        assert_eq!(s.train.n(), 120);
        assert_eq!(s.test.n(), 300);
        assert!(s.train.x.iter().all(|&v| (-4.0..=4.0).contains(&v)));
        assert_eq!(s.test.x[(0, 0)], -7.0);
        assert_eq!(s.test.x[(299, 0)], 7.0);
        let t = generate_sinc(&SincSpec::default(), 9).unwrap();
        assert_eq!(s.train.y, t.train.y);
        let z = generate_sinc(
            &SincSpec {
                noise_var: 0.0,
                n_test: 3,
                test_range: (-1.0, 1.0),
                ..SincSpec::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(z.test.y[1], 1.0);
    }
}
