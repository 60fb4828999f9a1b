//! Exact Gaussian process regression.
//!
//! The prior mean is a constant equal to the training-target mean: targets are
//! centered before conditioning and the offset is added back to every
//! predicted mean. Noise enters as `σε² I` on the training covariance.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::kernels::KernelSpec;
use crate::numerics::{
    cholesky_with_nugget, rng_from_seed, tri_solve, tri_solve_matrix, Matrix, Rng, Vector,
};
use crate::{Error, GaussianPrediction, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Settings for [`GpModel::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Maximize the log marginal likelihood over the hyperparameters.
    pub optimize: bool,
    /// Random restarts in addition to the supplied initial hyperparameters.
    pub restarts: usize,
    /// Keep `σε` fixed at its initial value (noise-free surrogate mode when 0).
    pub pin_noise: bool,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optimize: true,
            restarts: 3,
            pin_noise: false,
            max_iters: 200,
        }
    }
}

impl FitOptions {
    pub fn fixed() -> Self {
        Self {
            optimize: false,
            ..Self::default()
        }
    }
}

/// A conditioned Gaussian process. Immutable once built.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelSpec,
    noise_std: f64,
    x_train: Matrix,
    y_train: Vector,
    offset: f64,
    chol: Matrix,
    jitter: f64,
    alpha: Vector,
}

struct Factorized {
    chol: Matrix,
    jitter: f64,
    alpha: Vector,
}

fn factorize(kernel: &KernelSpec, noise_std: f64, x: &Matrix, yc: &Vector) -> Result<Factorized> {
    let mut k = kernel.cov_symmetric(x)?;
    let n2 = noise_std * noise_std;
    for i in 0..k.nrows() {
        k[(i, i)] += n2;
    }
    let nc = cholesky_with_nugget(&k)?;
    let tmp = tri_solve(&nc.factor, yc, false)?;
    let alpha = tri_solve(&nc.factor, &tmp, true)?;
    Ok(Factorized {
        chol: nc.factor,
        jitter: nc.jitter,
        alpha,
    })
}

fn lml_from(f: &Factorized, yc: &Vector) -> f64 {
    let n = yc.len() as f64;
    let log_det_half: f64 = f.chol.diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * yc.dot(&f.alpha) - log_det_half - 0.5 * n * LN_2PI
}

impl GpModel {
    /// Conditions the process on `(x, y)` with fixed hyperparameters.
    pub fn new(x: Matrix, y: Vector, kernel: KernelSpec, noise_std: f64) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        kernel.validate(Some(x.ncols()))?;
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidHyperparameter(format!(
                "noise std must be non-negative, got {noise_std}"
            )));
        }
        let offset = y.mean();
        let yc = y.add_scalar(-offset);
        let f = factorize(&kernel, noise_std, &x, &yc)?;
        Ok(Self {
            kernel,
            noise_std,
            x_train: x,
            y_train: y,
            offset,
            chol: f.chol,
            jitter: f.jitter,
            alpha: f.alpha,
        })
    }

    /// Fits a model, optionally maximizing the log marginal likelihood from
    /// the given starting point plus `options.restarts` random starts.
    pub fn fit(
        x: Matrix,
        y: Vector,
        kernel: KernelSpec,
        noise_std: f64,
        options: &FitOptions,
        rng: &mut Rng,
    ) -> Result<Self> {
        let initial = Self::new(x, y, kernel, noise_std)?;
        if !options.optimize {
            return Ok(initial);
        }
        let problem = LmlProblem::new(&initial, options.pin_noise);
        let mut starts = vec![problem.encode(&initial.kernel, initial.noise_std)];
        let seeds: Vec<u64> = (0..options.restarts).map(|_| rng.random()).collect();
        for seed in seeds {
            starts.push(problem.random_start(&mut rng_from_seed(seed)));
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in starts {
            if let Some((value, p)) = problem.ascend(start, options.max_iters) {
                if best.as_ref().is_none_or(|(b, _)| value > *b) {
                    best = Some((value, p));
                }
            }
        }
        let initial_lml = initial.log_marginal_likelihood();
        match best {
            Some((value, p)) if value > initial_lml => {
                let (kernel, noise) = problem.decode(&p);
                Self::new(initial.x_train, initial.y_train, kernel, noise)
            }
            _ => Ok(initial),
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn x_train(&self) -> &Matrix {
        &self.x_train
    }

    pub fn y_train(&self) -> &Vector {
        &self.y_train
    }

    /// Constant prior mean (training-target mean).
    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Diagonal jitter added by the nugget fallback, 0 when none was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cholesky_factor(&self) -> &Matrix {
        &self.chol
    }

    pub fn alpha(&self) -> &Vector {
        &self.alpha
    }

    pub fn input_dim(&self) -> usize {
        self.x_train.ncols()
    }

    /// `-½ yᵀα − Σ ln Lᵢᵢ − (N/2) ln 2π` on the centered targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let yc = self.y_train.add_scalar(-self.offset);
        let n = yc.len() as f64;
        let log_det_half: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * yc.dot(&self.alpha) - log_det_half - 0.5 * n * LN_2PI
    }

    /// Gradient of the log marginal likelihood with respect to
    /// `[ln σf, ln l…, ln σε]`. The noise entry is 0 when `σε = 0`.
    pub fn log_marginal_likelihood_grad(&self) -> Result<Vec<f64>> {
        let n = self.x_train.nrows();
        let l_inv = tri_solve_matrix(&self.chol, &Matrix::identity(n, n), false)?;
        let k_inv = l_inv.transpose() * &l_inv;
        let w = &self.alpha * self.alpha.transpose() - k_inv;
        let mut grad: Vec<f64> = self
            .kernel
            .kernel_grad(&self.x_train)?
            .iter()
            .map(|dk| 0.5 * w.component_mul(dk).sum())
            .collect();
        let s2 = self.noise_std * self.noise_std;
        grad.push(0.5 * w.trace() * 2.0 * s2);
        Ok(grad)
    }

    /// Predictive Gaussians at the rows of `x_star`. The epistemic part is
    /// the posterior variance of the latent function; the aleatory part is
    /// `σε²` when `include_noise` is set.
    pub fn predict(&self, x_star: &Matrix, include_noise: bool) -> Result<Vec<GaussianPrediction>> {
        if x_star.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x_star.ncols(),
            });
        }
        let ks = self.kernel.cov_matrix(&self.x_train, x_star)?;
        let mean = ks.transpose() * &self.alpha;
        let v = tri_solve_matrix(&self.chol, &ks, false)?;
        let prior = self.kernel.variance();
        let aleatory = if include_noise {
            self.noise_std * self.noise_std
        } else {
            0.0
        };
        Ok((0..x_star.nrows())
            .map(|j| {
                let epistemic = prior - v.column(j).norm_squared();
                GaussianPrediction::new(mean[j] + self.offset, aleatory, epistemic)
            })
            .collect())
    }

    /// Posterior mean vector and full covariance of the latent function.
    pub fn posterior(&self, x_star: &Matrix) -> Result<(Vector, Matrix)> {
        if x_star.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x_star.ncols(),
            });
        }
        let ks = self.kernel.cov_matrix(&self.x_train, x_star)?;
        let mean = (ks.transpose() * &self.alpha).add_scalar(self.offset);
        let v = tri_solve_matrix(&self.chol, &ks, false)?;
        let mut cov = self.kernel.cov_symmetric(x_star)? - v.transpose() * v;
        symmetrize(&mut cov);
        Ok((mean, cov))
    }

    /// `n` joint draws of the latent function at `x_star` (one per row).
    pub fn sample_posterior(&self, x_star: &Matrix, n: usize, rng: &mut Rng) -> Result<Matrix> {
        let (mean, cov) = self.posterior(x_star)?;
        sample_gaussian_process(rng, &mean, &cov, n)
    }

    /// Re-conditions on the training set extended by new observations,
    /// keeping the hyperparameters.
    pub fn with_observations(&self, x_new: &Matrix, y_new: &Vector) -> Result<Self> {
        if x_new.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x_new.ncols(),
            });
        }
        let (x, y) = stack(&self.x_train, &self.y_train, x_new, y_new);
        Self::new(x, y, self.kernel.clone(), self.noise_std)
    }

    /// Euclidean distance from each row of `x_star` to its nearest training input.
    pub fn distance_to_training(&self, x_star: &Matrix) -> Vec<f64> {
        nearest_distances(&self.x_train, x_star)
    }

    pub fn to_saved(&self) -> SavedGpModel {
        SavedGpModel {
            kernel: self.kernel.clone(),
            noise_std: self.noise_std,
            x_train: rows_of(&self.x_train),
            y_train: self.y_train.iter().copied().collect(),
            offset: self.offset,
        }
    }

    pub fn from_saved(saved: SavedGpModel) -> Result<Self> {
        let d = saved.x_train.first().map_or(0, |r| r.len());
        let x = matrix_from_rows(&saved.x_train, d)?;
        let y = Vector::from_vec(saved.y_train);
        let mut model = Self::new(x, y, saved.kernel, saved.noise_std)?;
        if (model.offset - saved.offset).abs() > 1e-12 * saved.offset.abs().max(1.0) {
            return Err(Error::Schema("stored offset disagrees with targets".into()));
        }
        model.offset = saved.offset;
        Ok(model)
    }
}

/// On-disk form of a [`GpModel`]; factors are recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedGpModel {
    pub kernel: KernelSpec,
    pub noise_std: f64,
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub offset: f64,
}

/// `n` draws from the zero-mean prior at `x_star` (one per row).
pub fn sample_prior(kernel: &KernelSpec, x_star: &Matrix, n: usize, rng: &mut Rng) -> Result<Matrix> {
    let cov = kernel.cov_symmetric(x_star)?;
    sample_gaussian_process(rng, &Vector::zeros(x_star.nrows()), &cov, n)
}

fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Draws from `N(mean, cov)` for a (possibly rank-deficient) process
/// covariance. Uses Cholesky when it succeeds and otherwise a symmetric
/// eigendecomposition square root, so that zero-variance directions (noise-free
/// training points) stay exactly pinned.
fn sample_gaussian_process(rng: &mut Rng, mean: &Vector, cov: &Matrix, n: usize) -> Result<Matrix> {
    let d = mean.len();
    let factor = match crate::numerics::cholesky(cov) {
        Ok(l) => l,
        Err(Error::NotPositiveDefinite { pivot, value }) => {
            let eig = cov.clone().symmetric_eigen();
            let max = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
            if eig.eigenvalues.min() < -1e-8 * max {
                return Err(Error::NotPositiveDefinite { pivot, value });
            }
            let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals)
        }
        Err(e) => return Err(e),
    };
    let mut out = Matrix::zeros(n, d);
    let mut z = Vector::zeros(d);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = crate::numerics::standard_normal(rng);
        }
        let s = &factor * &z;
        for j in 0..d {
            out[(i, j)] = mean[j] + s[j];
        }
    }
    Ok(out)
}

pub(crate) fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], d: usize) -> Result<Matrix> {
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    Ok(Matrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

pub(crate) fn stack(x: &Matrix, y: &Vector, x_new: &Matrix, y_new: &Vector) -> (Matrix, Vector) {
    let n = x.nrows();
    let m = x_new.nrows();
    let xs = Matrix::from_fn(n + m, x.ncols(), |i, j| {
        if i < n {
            x[(i, j)]
        } else {
            x_new[(i - n, j)]
        }
    });
    let ys = Vector::from_fn(n + m, |i, _| if i < n { y[i] } else { y_new[i - n] });
    (xs, ys)
}

pub(crate) fn nearest_distances(train: &Matrix, x_star: &Matrix) -> Vec<f64> {
    x_star
        .row_iter()
        .map(|r| {
            train
                .row_iter()
                .map(|t| (t - r).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Log-space hyperparameter search problem for one dataset.
struct LmlProblem<'a> {
    model: &'a GpModel,
    yc: Vector,
    pin_noise: bool,
    y_scale: f64,
    x_scale: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> LmlProblem<'a> {
    fn new(model: &'a GpModel, pin_noise: bool) -> Self {
        let yc = model.y_train.add_scalar(-model.offset);
        let n = yc.len();
        let y_std = if n > 1 {
            (yc.norm_squared() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let y_scale = if y_std > 0.0 { y_std } else { 1.0 };
        let x = &model.x_train;
        let mut x_scale: f64 = 0.0;
        for c in x.column_iter() {
            x_scale = x_scale.max(c.max() - c.min());
        }
        if !(x_scale > 0.0) {
            x_scale = 1.0;
        }
        let n_kernel = model.kernel.n_params();
        let mut lower = vec![(1e-3 * y_scale).ln()];
        let mut upper = vec![(1e3 * y_scale).ln()];
        for _ in 1..n_kernel {
            lower.push((1e-3 * x_scale).ln());
            upper.push((1e3 * x_scale).ln());
        }
        if !pin_noise {
            lower.push((1e-6 * y_scale).ln());
            upper.push((10.0 * y_scale).ln());
        }
        Self {
            model,
            yc,
            pin_noise,
            y_scale,
            x_scale,
            lower,
            upper,
        }
    }

    fn encode(&self, kernel: &KernelSpec, noise: f64) -> Vec<f64> {
        let mut p = kernel.log_params();
        if !self.pin_noise {
            p.push(noise.max(1e-6 * self.y_scale).ln());
        }
        self.clamp(p)
    }

    fn decode(&self, p: &[f64]) -> (KernelSpec, f64) {
        let nk = self.model.kernel.n_params();
        let kernel = self.model.kernel.with_log_params(&p[..nk]);
        let noise = if self.pin_noise {
            self.model.noise_std
        } else {
            p[nk].exp()
        };
        (kernel, noise)
    }

    fn clamp(&self, mut p: Vec<f64>) -> Vec<f64> {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
        p
    }

    fn random_start(&self, rng: &mut Rng) -> Vec<f64> {
        let nk = self.model.kernel.n_params();
        let mut p = Vec::with_capacity(self.lower.len());
        let log_uniform = |rng: &mut Rng, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln());
        p.push(log_uniform(rng, 1e-2 * self.y_scale, 1e2 * self.y_scale));
        for _ in 1..nk {
            p.push(log_uniform(rng, 1e-2 * self.x_scale, 1e2 * self.x_scale));
        }
        if !self.pin_noise {
            p.push(log_uniform(rng, 1e-3 * self.y_scale, self.y_scale));
        }
        self.clamp(p)
    }

    fn value(&self, p: &[f64]) -> Option<f64> {
        let (kernel, noise) = self.decode(p);
        let f = factorize(&kernel, noise, &self.model.x_train, &self.yc).ok()?;
        let v = lml_from(&f, &self.yc);
        v.is_finite().then_some(v)
    }

    fn value_and_grad(&self, p: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (kernel, noise) = self.decode(p);
        let m = GpModel::new(
            self.model.x_train.clone(),
            self.model.y_train.clone(),
            kernel,
            noise,
        )
        .ok()?;
        let v = m.log_marginal_likelihood();
        let mut g = m.log_marginal_likelihood_grad().ok()?;
        if self.pin_noise {
            g.pop();
        }
        v.is_finite().then_some((v, g))
    }

    /// Projected gradient ascent with Armijo backtracking.
    fn ascend(&self, start: Vec<f64>, max_iters: usize) -> Option<(f64, Vec<f64>)> {
        let mut p = start;
        let (mut f, mut g) = self.value_and_grad(&p)?;
        let mut step = 0.1;
        for _ in 0..max_iters {
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-8 {
                break;
            }
            let mut accepted = None;
            let mut t = step;
            while t > 1e-10 {
                let cand = self.clamp(p.iter().zip(&g).map(|(a, b)| a + t * b / gnorm).collect());
                let moved: f64 = cand.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
                if moved == 0.0 {
                    break;
                }
                let predicted: f64 = cand.iter().zip(&p).zip(&g).map(|((c, a), gi)| gi * (c - a)).sum();
                if let Some(fc) = self.value(&cand) {
                    if fc >= f + 1e-4 * predicted {
                        accepted = Some((cand, fc));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((cand, fc)) = accepted else { break };
            let improvement = fc - f;
            p = cand;
            (f, g) = self.value_and_grad(&p)?;
            step = (t * 2.0).min(2.0);
            if improvement < 1e-10 * (1.0 + f.abs()) {
                break;
            }
        }
        Some((f, p))
    }
}
