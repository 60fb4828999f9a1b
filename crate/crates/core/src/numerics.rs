//! Dense linear algebra, sampling and scalar helpers shared by every model.
//!
//! Matrices are `nalgebra` dense `f64` matrices. Factorizations are written
//! out here rather than delegated so that failures can report the pivot that
//! broke and so that the nugget fallback is applied uniformly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Seedable generator used throughout the crate. There is no global RNG;
/// every stochastic routine takes one of these explicitly.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for task `index` of a run seeded with `seed` (splitmix64
/// finalizer over the pair). Parallel and serial runs use the same children.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile; returns `±inf` at the endpoints.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        // one Halley step on top of the library estimate tightens it to
        // near machine precision
        let x = Normal::standard().inverse_cdf(p);
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
        x - u / (1.0 + 0.5 * x * u)
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    check_symmetric(a)?;
    let n = a.nrows();
    // Work on U = Lᵀ so that every inner product runs over contiguous
    // column storage.
    let mut u = Matrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - {
            let col = u.column(j);
            col.rows(0, j).norm_squared()
        };
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        u[(j, j)] = djj;
        for i in (j + 1)..n {
            let dot = u.column(i).rows(0, j).dot(&u.column(j).rows(0, j));
            u[(j, i)] = (a[(i, j)] - dot) / djj;
        }
    }
    Ok(u.transpose())
}

/// Cholesky factor together with the diagonal jitter that was needed.
#[derive(Debug, Clone)]
pub struct NuggetCholesky {
    pub factor: Matrix,
    pub jitter: f64,
}

/// Cholesky with nugget fallback: on failure retry with
/// `1e-6 * mean(diag)` added to the diagonal, escalating by 10x up to `1e-2`.
pub fn cholesky_with_nugget(a: &Matrix) -> Result<NuggetCholesky> {
    let first_err = match cholesky(a) {
        Ok(factor) => return Ok(NuggetCholesky { factor, jitter: 0.0 }),
        Err(e @ Error::NotPositiveDefinite { .. }) => e,
        Err(e) => return Err(e),
    };
    let n = a.nrows();
    let mean_diag = a.diagonal().sum() / n.max(1) as f64;
    if !(mean_diag > 0.0) {
        return Err(first_err);
    }
    let mut last = first_err;
    for exponent in [-6, -5, -4, -3, -2] {
        let jitter = mean_diag * 10f64.powi(exponent);
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        match cholesky(&shifted) {
            Ok(factor) => return Ok(NuggetCholesky { factor, jitter }),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Solves `L x = b`, or `Lᵀ x = b` when `transposed`, for lower-triangular `L`.
pub fn tri_solve(l: &Matrix, b: &Vector, transposed: bool) -> Result<Vector> {
    let n = l.nrows();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: b.len(),
        });
    }
    let mut x = b.clone();
    tri_solve_in_place(l, x.as_mut_slice(), transposed)?;
    Ok(x)
}

/// Column-wise [`tri_solve`] for a right-hand-side matrix.
pub fn tri_solve_matrix(l: &Matrix, b: &Matrix, transposed: bool) -> Result<Matrix> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: b.nrows(),
        });
    }
    check_diagonal(l)?;
    let x = if transposed {
        l.tr_solve_lower_triangular(b)
    } else {
        l.solve_lower_triangular(b)
    };
    x.ok_or(Error::Singular { index: 0 })
}

fn check_diagonal(l: &Matrix) -> Result<()> {
    for i in 0..l.nrows() {
        if l[(i, i)] == 0.0 {
            return Err(Error::Singular { index: i });
        }
    }
    Ok(())
}

fn tri_solve_in_place(l: &Matrix, x: &mut [f64], transposed: bool) -> Result<()> {
    let n = l.nrows();
    check_diagonal(l)?;
    if !transposed {
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[(i, k)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
    } else {
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
    }
    Ok(())
}

/// Solves `(L Lᵀ) x = b` given the Cholesky factor.
pub fn cho_solve(l: &Matrix, b: &Vector) -> Result<Vector> {
    let y = tri_solve(l, b, false)?;
    tri_solve(l, &y, true)
}

/// Draws `n` samples from `N(mean, cov)`; row `i` of the result is sample `i`.
pub fn sample_mvn(rng: &mut Rng, mean: &Vector, cov: &Matrix, n: usize) -> Result<Matrix> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: cov.nrows(),
        });
    }
    let factor = if d > 0 && cov.diagonal().iter().all(|&v| v == 0.0) {
        // PSD with zero diagonal is the zero matrix
        check_symmetric(cov)?;
        Matrix::zeros(d, d)
    } else {
        cholesky_with_nugget(cov)?.factor
    };
    let mut out = Matrix::zeros(n, d);
    let mut z = Vector::zeros(d);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = standard_normal(rng);
        }
        let s = &factor * &z;
        for j in 0..d {
            out[(i, j)] = mean[j] + s[j];
        }
    }
    Ok(out)
}

/// Largest singular value with its singular vectors, from power iteration.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub left: Vector,
    pub right: Vector,
    pub iterations: usize,
}

/// Deterministic start vector for power iteration.
pub fn default_start(n: usize) -> Vector {
    let mut rng = rng_from_seed(0x5eed_0f_5e7d);
    let mut v = Vector::from_fn(n, |_, _| 1.0 + 0.5 * standard_normal(&mut rng));
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

/// Power iteration on `WᵀW` for the spectral norm `‖W‖₂`.
pub fn power_iteration(w: &Matrix, iters: usize, tol: f64) -> SpectralEstimate {
    power_iteration_from(w, &default_start(w.ncols()), iters, tol)
}

/// [`power_iteration`] warm-started from a right singular vector estimate.
pub fn power_iteration_from(w: &Matrix, start: &Vector, iters: usize, tol: f64) -> SpectralEstimate {
    let (m, n) = w.shape();
    let mut v = if start.len() == n && start.norm() > 0.0 {
        start.normalize()
    } else {
        default_start(n)
    };
    let mut u = Vector::zeros(m);
    let mut sigma = 0.0;
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let wv = w * &v;
        let s = wv.norm();
        if s == 0.0 {
            return SpectralEstimate {
                sigma: 0.0,
                left: Vector::zeros(m),
                right: v,
                iterations,
            };
        }
        u = wv / s;
        let wtu = w.transpose() * &u;
        let new_sigma = wtu.norm();
        v = wtu / new_sigma;
        let converged = (new_sigma - sigma).abs() <= tol * new_sigma;
        sigma = new_sigma;
        if converged {
            break;
        }
    }
    SpectralEstimate {
        sigma,
        left: u,
        right: v,
        iterations,
    }
}

/// Sample variance with the `n - 1` denominator; 0 for fewer than 2 values.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}
