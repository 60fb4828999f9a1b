//! Stationary covariance functions.
//!
//! All families are functions of a scaled Euclidean distance `r`. Hyperparameters
//! are positive and are exposed in log space for optimization, ordered as
//! `[ln σf, ln l₁, …, ln l_L]`.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

/// Half-integer Matérn orders with closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternOrder {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternOrder {
    pub fn from_nu(nu: f64) -> Result<Self> {
        if nu == 0.5 {
            Ok(Self::Half)
        } else if nu == 1.5 {
            Ok(Self::ThreeHalves)
        } else if nu == 2.5 {
            Ok(Self::FiveHalves)
        } else {
            Err(Error::UnsupportedOrder(nu))
        }
    }

    pub fn nu(self) -> f64 {
        match self {
            Self::Half => 0.5,
            Self::ThreeHalves => 1.5,
            Self::FiveHalves => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    SquaredExponential,
    ArdSquaredExponential,
    Matern(MaternOrder),
    AbsoluteExponential,
}

/// Kernel family plus its signal amplitude and length scale(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpecJson", into = "KernelSpecJson")]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma_f: f64,
    pub length_scales: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelSpecJson {
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu: Option<f64>,
    sigma_f: f64,
    length_scales: Vec<f64>,
}

impl TryFrom<KernelSpecJson> for KernelSpec {
    type Error = Error;

    fn try_from(j: KernelSpecJson) -> Result<Self> {
        let family = match j.family.as_str() {
            "squared_exponential" => KernelFamily::SquaredExponential,
            "ard_squared_exponential" => KernelFamily::ArdSquaredExponential,
            "absolute_exponential" => KernelFamily::AbsoluteExponential,
            "matern" => {
                let nu = j
                    .nu
                    .ok_or_else(|| Error::Schema("matern kernel requires `nu`".into()))?;
                KernelFamily::Matern(MaternOrder::from_nu(nu)?)
            }
            other => return Err(Error::Schema(format!("unknown kernel family `{other}`"))),
        };
        let spec = KernelSpec {
            family,
            sigma_f: j.sigma_f,
            length_scales: j.length_scales,
        };
        spec.validate(None)?;
        Ok(spec)
    }
}

impl From<KernelSpec> for KernelSpecJson {
    fn from(k: KernelSpec) -> Self {
        let (family, nu) = match k.family {
            KernelFamily::SquaredExponential => ("squared_exponential", None),
            KernelFamily::ArdSquaredExponential => ("ard_squared_exponential", None),
            KernelFamily::AbsoluteExponential => ("absolute_exponential", None),
            KernelFamily::Matern(order) => ("matern", Some(order.nu())),
        };
        KernelSpecJson {
            family: family.to_string(),
            nu,
            sigma_f: k.sigma_f,
            length_scales: k.length_scales,
        }
    }
}

impl KernelSpec {
    pub fn squared_exponential(length_scale: f64, sigma_f: f64) -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            sigma_f,
            length_scales: vec![length_scale],
        }
    }

    pub fn ard(length_scales: Vec<f64>, sigma_f: f64) -> Self {
        Self {
            family: KernelFamily::ArdSquaredExponential,
            sigma_f,
            length_scales,
        }
    }

    pub fn matern(nu: f64, length_scale: f64, sigma_f: f64) -> Result<Self> {
        Ok(Self {
            family: KernelFamily::Matern(MaternOrder::from_nu(nu)?),
            sigma_f,
            length_scales: vec![length_scale],
        })
    }

    pub fn absolute_exponential(length_scale: f64, sigma_f: f64) -> Self {
        Self {
            family: KernelFamily::AbsoluteExponential,
            sigma_f,
            length_scales: vec![length_scale],
        }
    }

    /// Checks positivity, and the ARD length-scale count when `dim` is known.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.sigma_f > 0.0) || !self.sigma_f.is_finite() {
            return Err(Error::InvalidHyperparameter(format!(
                "sigma_f must be positive, got {}",
                self.sigma_f
            )));
        }
        if self.length_scales.is_empty() {
            return Err(Error::InvalidHyperparameter("no length scale given".into()));
        }
        if let Some(l) = self.length_scales.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "length scales must be positive, got {l}"
            )));
        }
        match self.family {
            KernelFamily::ArdSquaredExponential => {
                if let Some(d) = dim {
                    if self.length_scales.len() != d {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            actual: self.length_scales.len(),
                        });
                    }
                }
            }
            _ => {
                if self.length_scales.len() != 1 {
                    return Err(Error::InvalidHyperparameter(
                        "isotropic kernels take exactly one length scale".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        1 + self.length_scales.len()
    }

    pub fn log_params(&self) -> Vec<f64> {
        std::iter::once(self.sigma_f.ln())
            .chain(self.length_scales.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn with_log_params(&self, p: &[f64]) -> Self {
        assert_eq!(p.len(), self.n_params());
        Self {
            family: self.family,
            sigma_f: p[0].exp(),
            length_scales: p[1..].iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn variance(&self) -> f64 {
        self.sigma_f * self.sigma_f
    }

    fn is_ard(&self) -> bool {
        matches!(self.family, KernelFamily::ArdSquaredExponential)
    }

    /// Kernel value as a function of the scaled distance `r`.
    fn profile(&self, r: f64) -> f64 {
        let s2 = self.variance();
        match self.family {
            KernelFamily::SquaredExponential | KernelFamily::ArdSquaredExponential => {
                s2 * (-0.5 * r * r).exp()
            }
            KernelFamily::AbsoluteExponential | KernelFamily::Matern(MaternOrder::Half) => {
                s2 * (-r).exp()
            }
            KernelFamily::Matern(MaternOrder::ThreeHalves) => {
                let a = 3f64.sqrt() * r;
                s2 * (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern(MaternOrder::FiveHalves) => {
                let a = 5f64.sqrt() * r;
                s2 * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
        }
    }

    /// `-r k'(r)`, the derivative of the kernel with respect to `ln l` for an
    /// isotropic length scale.
    fn log_length_derivative(&self, r: f64) -> f64 {
        let s2 = self.variance();
        match self.family {
            KernelFamily::SquaredExponential | KernelFamily::ArdSquaredExponential => {
                s2 * r * r * (-0.5 * r * r).exp()
            }
            KernelFamily::AbsoluteExponential | KernelFamily::Matern(MaternOrder::Half) => {
                s2 * r * (-r).exp()
            }
            KernelFamily::Matern(MaternOrder::ThreeHalves) => {
                let a = 3f64.sqrt() * r;
                3.0 * s2 * r * r * (-a).exp()
            }
            KernelFamily::Matern(MaternOrder::FiveHalves) => {
                let a = 5f64.sqrt() * r;
                5.0 / 3.0 * s2 * r * r * (1.0 + a) * (-a).exp()
            }
        }
    }

    fn scaled_distance<'a>(&self, x: impl Iterator<Item = (&'a f64, &'a f64)>) -> f64 {
        if self.is_ard() {
            x.zip(&self.length_scales)
                .map(|((a, b), l)| ((a - b) / l).powi(2))
                .sum::<f64>()
                .sqrt()
        } else {
            let d2: f64 = x.map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() / self.length_scales[0]
        }
    }

    fn check_dims(&self, dx: usize, dy: usize) -> Result<()> {
        if dx != dy {
            return Err(Error::DimensionMismatch {
                expected: dx,
                actual: dy,
            });
        }
        self.validate(Some(dx))
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dims(x.len(), y.len())?;
        Ok(self.profile(self.scaled_distance(x.iter().zip(y))))
    }

    /// Cross-covariance matrix between the rows of `a` and the rows of `b`.
    pub fn cov_matrix(&self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        self.check_dims(a.ncols(), b.ncols())?;
        let at = a.transpose();
        let bt = b.transpose();
        Ok(Matrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            let r = self.scaled_distance(at.column(i).iter().zip(bt.column(j).iter()));
            self.profile(r)
        }))
    }

    /// Symmetric covariance of a point set with itself.
    pub fn cov_symmetric(&self, a: &Matrix) -> Result<Matrix> {
        self.check_dims(a.ncols(), a.ncols())?;
        let n = a.nrows();
        let at = a.transpose();
        let mut k = Matrix::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = self.variance();
            for i in (j + 1)..n {
                let r = self.scaled_distance(at.column(i).iter().zip(at.column(j).iter()));
                let v = self.profile(r);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Derivatives of `cov_symmetric(x)` with respect to each log
    /// hyperparameter, in [`log_params`](Self::log_params) order.
    pub fn kernel_grad(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let k = self.cov_symmetric(x)?;
        let n = x.nrows();
        let xt = x.transpose();
        let mut grads = Vec::with_capacity(self.n_params());
        grads.push(&k * 2.0);
        if self.is_ard() {
            for (d, l) in self.length_scales.iter().enumerate() {
                let g = Matrix::from_fn(n, n, |i, j| {
                    let diff = (x[(i, d)] - x[(j, d)]) / l;
                    k[(i, j)] * diff * diff
                });
                grads.push(g);
            }
        } else {
            let g = Matrix::from_fn(n, n, |i, j| {
                if i == j {
                    0.0
                } else {
                    self.log_length_derivative(
                        self.scaled_distance(xt.column(i).iter().zip(xt.column(j).iter())),
                    )
                }
            });
            grads.push(g);
        }
        Ok(grads)
    }
}
