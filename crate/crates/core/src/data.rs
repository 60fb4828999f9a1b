//! Toy problem generators, CSV ingestion, standardization and 2D grids.
//!
//! CSV dialect: comma separated, UTF-8, one header row, `.` as decimal
//! separator, every cell numeric.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics::{rng_from_seed, sample_mvn, standard_normal, Matrix, Vector};
use crate::{Error, Result};

/// Observation noise of the 1D toy problem.
pub const TOY_1D_NOISE_STD: f64 = 0.1;

/// Means of the two training clusters of the 2D toy problem.
pub const TOY_2D_CLUSTER_MEANS: [[f64; 2]; 2] = [[8.0, 3.5], [-2.5, -2.5]];
/// Covariance shared by all 2D toy clusters.
pub const TOY_2D_CLUSTER_COV: [[f64; 2]; 2] = [[0.4, -0.32], [-0.32, 0.4]];
/// Center of the out-of-distribution cluster (lower-left region).
pub const TOY_2D_OOD_MEAN: [f64; 2] = [-11.0, -11.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vector,
    #[serde(default)]
    pub feature_names: Option<Vec<String>>,
    #[serde(default)]
    pub target_name: Option<String>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        Ok(Self {
            x,
            y,
            feature_names: None,
            target_name: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Rows `rows` of this dataset, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: Vector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }

    /// Column names used when writing CSV: stored names or `x0, x1, …`, `y`.
    pub fn column_names(&self) -> (Vec<String>, String) {
        let features = self
            .feature_names
            .clone()
            .unwrap_or_else(|| (0..self.dim()).map(|j| format!("x{j}")).collect());
        let target = self.target_name.clone().unwrap_or_else(|| "y".into());
        (features, target)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let (mut header, target) = self.column_names();
        header.push(target);
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv {
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

pub fn toy_1d_true(x: f64) -> f64 {
    (0.9 * x).sin()
}

/// `n` points with x uniform over `x_range` and `y = sin(0.9x) + N(0, noise_std²)`.
pub fn gen_toy_1d(n: usize, x_range: (f64, f64), noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let (lo, hi) = x_range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("empty range [{lo}, {hi})")));
    }
    let mut rng = rng_from_seed(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| toy_1d_true(v) + noise_std * standard_normal(&mut rng))
        .collect();
    Dataset::new(Matrix::from_vec(n, 1, x), Vector::from_vec(y))
}

/// The calibration walkthrough: 8 noisy training points drawn from
/// `[-3, -1) ∪ [2, 4)` and 100 noisy test points equally spaced on `[-5, 5]`.
pub fn toy_1d_walkthrough(seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = rng_from_seed(seed);
    let mut x_train = Vec::with_capacity(8);
    for i in 0..8 {
        let (lo, hi) = if i < 4 { (-3.0, -1.0) } else { (2.0, 4.0) };
        x_train.push(rng.random_range(lo..hi));
    }
    let noisy = |x: &[f64], rng: &mut crate::numerics::Rng| -> Vector {
        Vector::from_iterator(
            x.len(),
            x.iter()
                .map(|&v| toy_1d_true(v) + TOY_1D_NOISE_STD * standard_normal(rng)),
        )
    };
    let y_train = noisy(&x_train, &mut rng);
    let x_test: Vec<f64> = (0..100).map(|i| -5.0 + 10.0 * i as f64 / 99.0).collect();
    let y_test = noisy(&x_test, &mut rng);
    Ok((
        Dataset::new(Matrix::from_vec(8, 1, x_train), y_train)?,
        Dataset::new(Matrix::from_vec(100, 1, x_test), y_test)?,
    ))
}

pub fn toy_2d_true(x1: f64, x2: f64) -> f64 {
    let a = 1.5 + x1;
    (a * a + 4.0) * (1.5 + x2) / 20.0 - (5.0 * a / 2.0).sin()
}

/// Noise standard deviation of the heteroscedastic variant at target `y`:
/// variance `0.5 sin²(y)`.
pub fn toy_2d_noise_std(y: f64) -> f64 {
    (0.5f64).sqrt() * y.sin().abs()
}

fn toy_2d_from_points(points: Matrix, heteroscedastic: bool, rng: &mut crate::numerics::Rng) -> Result<Dataset> {
    let y = Vector::from_iterator(
        points.nrows(),
        (0..points.nrows()).map(|i| {
            let clean = toy_2d_true(points[(i, 0)], points[(i, 1)]);
            if heteroscedastic {
                clean + toy_2d_noise_std(clean) * standard_normal(rng)
            } else {
                clean
            }
        }),
    );
    Dataset::new(points, y)
}

fn cluster_cov() -> Matrix {
    let c = TOY_2D_CLUSTER_COV;
    Matrix::from_row_slice(2, 2, &[c[0][0], c[0][1], c[1][0], c[1][1]])
}

/// `n_per_cluster` points from each of the two training clusters; the first
/// half of the rows comes from the cluster at (8, 3.5).
pub fn gen_toy_2d_clusters(n_per_cluster: usize, seed: u64, heteroscedastic: bool) -> Result<Dataset> {
    if n_per_cluster == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = rng_from_seed(seed);
    let cov = cluster_cov();
    let mut points = Matrix::zeros(2 * n_per_cluster, 2);
    for (c, mean) in TOY_2D_CLUSTER_MEANS.iter().enumerate() {
        let draws = sample_mvn(&mut rng, &Vector::from_row_slice(mean), &cov, n_per_cluster)?;
        points
            .rows_mut(c * n_per_cluster, n_per_cluster)
            .copy_from(&draws);
    }
    toy_2d_from_points(points, heteroscedastic, &mut rng)
}

/// Out-of-distribution cluster centered at [`TOY_2D_OOD_MEAN`].
pub fn gen_toy_2d_ood(n: usize, seed: u64, heteroscedastic: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = rng_from_seed(seed);
    let points = sample_mvn(&mut rng, &Vector::from_row_slice(&TOY_2D_OOD_MEAN), &cluster_cov(), n)?;
    toy_2d_from_points(points, heteroscedastic, &mut rng)
}

/// Axis-aligned rectangle `[x1_min, x1_max] × [x2_min, x2_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x1: (f64, f64),
    pub x2: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            x1: (-15.0, 15.0),
            x2: (-15.0, 15.0),
        }
    }
}

pub const DEFAULT_GRID_RESOLUTION: usize = 200;

/// `resolution²` grid points. Point `k = r·resolution + c` has x1 from
/// column `c` and x2 from row `r`, so x1 varies fastest.
pub fn grid2d(bounds: Bounds, resolution: usize) -> Result<Matrix> {
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    for (lo, hi) in [bounds.x1, bounds.x2] {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("inverted bounds [{lo}, {hi}]")));
        }
    }
    let axis = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let n = resolution * resolution;
    Ok(Matrix::from_fn(n, 2, |k, j| {
        if j == 0 {
            axis(bounds.x1, k % resolution)
        } else {
            axis(bounds.x2, k / resolution)
        }
    }))
}

/// Reads a numeric CSV; `target` names the column that becomes `y`, all other
/// columns become features in file order.
pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<Dataset> {
    let (names, rows) = read_numeric_csv(path)?;
    let t = names
        .iter()
        .position(|n| n == target)
        .ok_or_else(|| Error::MissingColumn(target.to_string()))?;
    let features: Vec<String> = names
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, n)| n.clone())
        .collect();
    let n = rows.len();
    let d = features.len();
    let mut x = Matrix::zeros(n, d);
    let mut y = Vector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let mut col = 0;
        for (j, &v) in row.iter().enumerate() {
            if j == t {
                y[i] = v;
            } else {
                x[(i, col)] = v;
                col += 1;
            }
        }
    }
    Ok(Dataset {
        x,
        y,
        feature_names: Some(features),
        target_name: Some(target.to_string()),
    })
}

/// Reads a CSV of features only (no target column).
pub fn load_features_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Matrix)> {
    let (names, rows) = read_numeric_csv(path)?;
    let d = names.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok((names, Matrix::from_row_slice(flat.len() / d.max(1), d, &flat)))
}

/// Header plus all rows parsed as `f64`. Data row numbers in errors are
/// 1-based and exclude the header.
pub fn read_numeric_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let names: Vec<String> = reader
        .headers()
        .map_err(csv_io)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if names.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            row: r + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(names.len());
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                row: r + 1,
                column: names[j].clone(),
                message: format!("not a number: {cell:?}"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok((names, rows))
}

/// Per-feature and target statistics; the JSON sidecar of a standardized
/// dataset. Features with zero variance are flagged and left unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub unscaled_features: Vec<usize>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl Standardization {
    /// Statistics of `ds` (sample standard deviation, `N − 1`).
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyData);
        }
        let mut x_mean = Vec::with_capacity(ds.dim());
        let mut x_std = Vec::with_capacity(ds.dim());
        let mut unscaled = Vec::new();
        for j in 0..ds.dim() {
            let (m, s) = mean_std(ds.x.column(j).iter().copied());
            x_mean.push(m);
            if s > 0.0 {
                x_std.push(s);
            } else {
                unscaled.push(j);
                x_std.push(1.0);
            }
        }
        let (y_mean, y_std) = mean_std(ds.y.iter().copied());
        Ok(Self {
            x_mean,
            x_std,
            unscaled_features: unscaled,
            y_mean,
            y_std: if y_std > 0.0 { y_std } else { 1.0 },
        })
    }

    fn feature_shift(&self, j: usize) -> f64 {
        if self.unscaled_features.contains(&j) {
            0.0
        } else {
            self.x_mean[j]
        }
    }

    pub fn apply_x(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x_mean.len(),
                actual: x.ncols(),
            });
        }
        Ok(Matrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.feature_shift(j)) / self.x_std[j]
        }))
    }

    pub fn invert_x(&self, z: &Matrix) -> Result<Matrix> {
        if z.ncols() != self.x_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x_mean.len(),
                actual: z.ncols(),
            });
        }
        Ok(Matrix::from_fn(z.nrows(), z.ncols(), |i, j| {
            z[(i, j)] * self.x_std[j] + self.feature_shift(j)
        }))
    }

    pub fn apply_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn invert_y(&self, z: f64) -> f64 {
        z * self.y_std + self.y_mean
    }

    /// Converts a variance in standardized target units back to data units.
    pub fn invert_variance(&self, v: f64) -> f64 {
        v * self.y_std * self.y_std
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.apply_x(&ds.x)?,
            y: ds.y.map(|v| self.apply_y(v)),
            feature_names: ds.feature_names.clone(),
            target_name: ds.target_name.clone(),
        })
    }

    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.invert_x(&ds.x)?,
            y: ds.y.map(|v| self.invert_y(v)),
            feature_names: ds.feature_names.clone(),
            target_name: ds.target_name.clone(),
        })
    }
}

/// Standardizes `ds` with its own statistics.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardization)> {
    let record = Standardization::fit(ds)?;
    Ok((record.apply(ds)?, record))
}
