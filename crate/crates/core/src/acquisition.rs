//! Acquisition functions over Gaussian predictions and a sequential GP
//! refinement loop over a finite candidate pool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::csv_io;
use crate::gpr::{FitOptions, GpModel};
use crate::numerics::{normal_cdf, normal_pdf, Matrix, Rng, Vector};
use crate::{Error, GaussianPrediction, Result};

/// Half-width of the expected-feasibility band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tau {
    /// `τ = k·σ(x)`.
    SigmaMultiple(f64),
    Fixed(f64),
}

impl Default for Tau {
    fn default() -> Self {
        Self::SigmaMultiple(2.0)
    }
}

impl Tau {
    pub fn resolve(self, sigma: f64) -> f64 {
        match self {
            Self::SigmaMultiple(k) => k * sigma,
            Self::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AcquisitionSpec {
    /// Expected feasibility around the limit-state `threshold`; maximized.
    Eff {
        threshold: f64,
        #[serde(default)]
        tau: Tau,
    },
    /// `|μ − e|/σ`; minimized.
    U { threshold: f64 },
    /// Expected improvement below the best observation; maximized.
    Ei,
}

impl AcquisitionSpec {
    pub fn validate(&self) -> Result<()> {
        if let Self::Eff { tau, .. } = self {
            let v = match tau {
                Tau::SigmaMultiple(k) => *k,
                Tau::Fixed(t) => *t,
            };
            if !(v > 0.0) {
                return Err(Error::Schema("EFF half-width must be positive".into()));
            }
        }
        Ok(())
    }

    fn maximize(&self) -> bool {
        !matches!(self, Self::U { .. })
    }
}

/// Expected feasibility `∫_{e−τ}^{e+τ} (τ − |e − y|) p(y) dy` for
/// `y ~ N(μ, σ²)`. At `σ = 0` this is `max(τ − |e − μ|, 0)`.
pub fn eff(mean: f64, sigma: f64, e: f64, tau: f64) -> f64 {
    if sigma <= 0.0 {
        return (tau - (e - mean).abs()).max(0.0);
    }
    let t0 = (e - mean) / sigma;
    let tm = (e - tau - mean) / sigma;
    let tp = (e + tau - mean) / sigma;
    let value = (mean - e) * (2.0 * normal_cdf(t0) - normal_cdf(tm) - normal_cdf(tp))
        - sigma * (2.0 * normal_pdf(t0) - normal_pdf(tm) - normal_pdf(tp))
        + tau * (normal_cdf(tp) - normal_cdf(tm));
    value.max(0.0)
}

/// `|μ − e|/σ`. Returns `(f64::INFINITY, true)` when `σ = 0`, the flag marking
/// the degenerate case.
pub fn u_function(mean: f64, sigma: f64, e: f64) -> (f64, bool) {
    if sigma > 0.0 {
        ((mean - e).abs() / sigma, false)
    } else {
        (f64::INFINITY, true)
    }
}

/// Expected improvement for minimization, `(f_min − μ)Φ(z) + σφ(z)`.
pub fn ei(mean: f64, sigma: f64, f_min: f64) -> f64 {
    if sigma <= 0.0 {
        return (f_min - mean).max(0.0);
    }
    let z = (f_min - mean) / sigma;
    (f_min - mean) * normal_cdf(z) + sigma * normal_pdf(z)
}

/// Acquisition value of one prediction; `f_min` is only used by EI.
pub fn evaluate(spec: &AcquisitionSpec, pred: &GaussianPrediction, f_min: f64) -> f64 {
    let sigma = pred.std();
    match *spec {
        AcquisitionSpec::Eff { threshold, tau } => eff(pred.mean, sigma, threshold, tau.resolve(sigma)),
        AcquisitionSpec::U { threshold } => u_function(pred.mean, sigma, threshold).0,
        AcquisitionSpec::Ei => ei(pred.mean, sigma, f_min),
    }
}

/// Index of the best value (largest when `maximize`), lowest index on ties.
pub fn select(values: &[f64], maximize: bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                if maximize {
                    v > values[b]
                } else {
                    v < values[b]
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub x: Vec<f64>,
    pub acquisition: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub model: GpModel,
    pub trace: Vec<TraceRow>,
}

impl RefineResult {
    /// Columns `iteration,x0,…,acquisition,oracle`.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_trace_csv(&self.trace, self.model.input_dim(), path)
    }
}

pub fn write_trace_csv(trace: &[TraceRow], dim: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["iteration".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    header.push("acquisition".into());
    header.push("oracle".into());
    w.write_record(&header).map_err(csv_io)?;
    for row in trace {
        let mut rec = vec![row.iteration.to_string()];
        rec.extend(row.x.iter().map(|v| v.to_string()));
        rec.push(row.acquisition.to_string());
        rec.push(row.oracle.to_string());
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Sequential refinement: at each of `budget` iterations the acquisition is
/// evaluated on every candidate (latent predictions), the oracle is queried
/// at the best candidate and the model is refit with `refit` options.
pub fn refine<F>(
    model: &GpModel,
    mut oracle: F,
    spec: &AcquisitionSpec,
    candidates: &Matrix,
    budget: usize,
    refit: &FitOptions,
    rng: &mut Rng,
) -> Result<RefineResult>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, String>,
{
    spec.validate()?;
    if candidates.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if candidates.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: candidates.ncols(),
        });
    }
    let mut current = model.clone();
    let mut trace = Vec::with_capacity(budget);
    for iteration in 0..budget {
        let preds = current.predict(candidates, false)?;
        let f_min = current.y_train().min();
        let values: Vec<f64> = preds.iter().map(|p| evaluate(spec, p, f_min)).collect();
        let best = select(&values, spec.maximize()).ok_or_else(|| Error::Oracle {
            iteration,
            message: "acquisition undefined on every candidate".into(),
        })?;
        let x: Vec<f64> = candidates.row(best).iter().copied().collect();
        let y = oracle(&x).map_err(|message| Error::Oracle { iteration, message })?;
        let (xs, ys) = crate::gpr::stack(
            current.x_train(),
            current.y_train(),
            &Matrix::from_row_slice(1, x.len(), &x),
            &Vector::from_element(1, y),
        );
        current = GpModel::fit(xs, ys, current.kernel().clone(), current.noise_std(), refit, rng)?;
        trace.push(TraceRow {
            iteration,
            x,
            acquisition: values[best],
            oracle: y,
        });
    }
    Ok(RefineResult { model: current, trace })
}
