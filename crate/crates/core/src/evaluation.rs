//! Metrics for the quality of predictive uncertainty.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::csv_io;
use crate::numerics::{derive_seed, normal_cdf, normal_quantile, rng_from_seed};
use crate::{Error, GaussianPrediction, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Central interval `μ ± σ Φ⁻¹((1 + c)/2)`.
    TwoSided,
    /// Lower-tail interval `(−∞, μ + σ Φ⁻¹(c)]`.
    OneSided,
    /// Binned class-1 probabilities.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Weights proportional to the per-level counts (samples inside the
    /// interval for regression, samples in the bin for classification).
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    /// Observed confidence; `None` for empty classification bins.
    pub observed: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub mode: CalibrationMode,
}

/// `k` equally spaced levels from 0 to 1.
pub fn default_levels(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..k).map(|j| j as f64 / (k - 1) as f64).collect(),
    }
}

fn check_aligned(preds: &[GaussianPrediction], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: preds.len(),
            actual: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(())
}

/// Predictive CDF value of `y`. A zero-variance prediction is a point mass:
/// 0 below the mean, 1 above, ½ at the mean.
pub fn pit(pred: &GaussianPrediction, y: f64) -> f64 {
    let sd = pred.std();
    if sd > 0.0 {
        normal_cdf((y - pred.mean) / sd)
    } else if y < pred.mean {
        0.0
    } else if y > pred.mean {
        1.0
    } else {
        0.5
    }
}

fn inside(u: f64, c: f64, mode: CalibrationMode) -> bool {
    match mode {
        CalibrationMode::OneSided => u <= c,
        _ => (2.0 * u - 1.0).abs() <= c,
    }
}

fn curve_from_pits(u: &[f64], levels: &[f64], mode: CalibrationMode) -> CalibrationCurve {
    let n = u.len() as f64;
    let counts: Vec<usize> = levels
        .iter()
        .map(|&c| u.iter().filter(|&&v| inside(v, c, mode)).count())
        .collect();
    CalibrationCurve {
        levels: levels.to_vec(),
        observed: counts.iter().map(|&k| Some(k as f64 / n)).collect(),
        counts,
        mode,
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no confidence levels".into()));
    }
    if levels.iter().any(|c| !(0.0..=1.0).contains(c)) || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "confidence levels must be strictly increasing within [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Fraction of targets inside each level's interval under the predicted
/// Gaussians (total variance).
pub fn regression_calibration(
    preds: &[GaussianPrediction],
    targets: &[f64],
    levels: &[f64],
    mode: CalibrationMode,
) -> Result<CalibrationCurve> {
    check_aligned(preds, targets)?;
    check_levels(levels)?;
    if mode == CalibrationMode::Classification {
        return Err(Error::InvalidArgument(
            "use classification_calibration for binned probabilities".into(),
        ));
    }
    let u: Vec<f64> = preds.iter().zip(targets).map(|(p, &y)| pit(p, y)).collect();
    Ok(curve_from_pits(&u, levels, mode))
}

/// Reliability diagram over `k` bins `[0, 1/k], (1/k, 2/k], …`; each bin's
/// level is its center.
pub fn classification_calibration(probs: &[f64], labels: &[f64], k: usize) -> Result<CalibrationCurve> {
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut counts = vec![0usize; k];
    let mut positives = vec![0.0; k];
    for (&p, &y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidArgument(format!("label {y} is not 0 or 1")));
        }
        let bin = ((p * k as f64).ceil() as usize).saturating_sub(1).min(k - 1);
        counts[bin] += 1;
        positives[bin] += y;
    }
    Ok(CalibrationCurve {
        levels: (0..k).map(|j| (j as f64 + 0.5) / k as f64).collect(),
        observed: counts
            .iter()
            .zip(&positives)
            .map(|(&n, &s)| (n > 0).then(|| s / n as f64))
            .collect(),
        counts,
        mode: CalibrationMode::Classification,
    })
}

impl CalibrationCurve {
    /// Normalized weights; absent levels get weight 0.
    pub fn weights(&self, weighting: Weighting) -> Vec<f64> {
        let raw: Vec<f64> = self
            .observed
            .iter()
            .zip(&self.counts)
            .map(|(o, &n)| match (o, weighting) {
                (None, _) => 0.0,
                (Some(_), Weighting::Uniform) => 1.0,
                (Some(_), Weighting::Count) => n as f64,
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter().map(|w| w / total).collect()
        } else if weighting == Weighting::Count {
            self.weights(Weighting::Uniform)
        } else {
            raw
        }
    }

    pub fn max_abs_error(&self) -> f64 {
        self.present()
            .map(|(c, o)| (o - c).abs())
            .fold(0.0, f64::max)
    }

    fn present(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.levels
            .iter()
            .zip(&self.observed)
            .filter_map(|(&c, o)| o.map(|o| (c, o)))
    }

    /// Columns `level,observed,weight`; absent observations are left empty.
    pub fn write_csv(&self, path: impl AsRef<Path>, weighting: Weighting) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(["level", "observed", "weight"]).map_err(csv_io)?;
        for ((c, o), wt) in self.levels.iter().zip(&self.observed).zip(self.weights(weighting)) {
            let o = o.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([c.to_string(), o, wt.to_string()]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected calibration error `Σ wⱼ |ĉⱼ − cⱼ|`.
pub fn ece(curve: &CalibrationCurve, weighting: Weighting) -> f64 {
    curve
        .levels
        .iter()
        .zip(&curve.observed)
        .zip(curve.weights(weighting))
        .filter_map(|((c, o), w)| o.map(|o| w * (o - c).abs()))
        .sum()
}

/// `∫ₐᵇ |d(t)| dt` for `d` linear with end values `d0`, `d1`.
fn abs_linear_area(d0: f64, d1: f64, h: f64) -> f64 {
    if d0 * d1 >= 0.0 {
        0.5 * h * (d0 + d1).abs()
    } else {
        0.5 * h * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs())
    }
}

/// Absolute area between the piecewise-linear curve and the identity over
/// the span of present levels. Crossings are located exactly, so over- and
/// under-confident lobes add up instead of cancelling.
pub fn miscalibration_area(curve: &CalibrationCurve) -> f64 {
    let pts: Vec<(f64, f64)> = curve.present().collect();
    pts.windows(2)
        .map(|w| abs_linear_area(w[0].1 - w[0].0, w[1].1 - w[1].0, w[1].0 - w[0].0))
        .sum()
}

/// PIT values and the area between their empirical CDF and the uniform CDF.
pub fn u_pool(preds: &[GaussianPrediction], targets: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_aligned(preds, targets)?;
    let u: Vec<f64> = preds.iter().zip(targets).map(|(p, &y)| pit(p, y)).collect();
    let mut sorted = u.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // the empirical CDF equals k/N on [u_(k), u_(k+1))
    let mut area = 0.0;
    let mut left = 0.0;
    for (k, &right) in sorted.iter().enumerate() {
        area += abs_step_area(k as f64 / n, left, right);
        left = right;
    }
    area += abs_step_area(1.0, left, 1.0);
    Ok((u, area))
}

/// `∫ₐᵇ |level − t| dt`.
fn abs_step_area(level: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let f = |t: f64| {
        let d = t - level;
        0.5 * d * d.abs()
    };
    f(b) - f(a)
}

/// Mean Gaussian negative log-likelihood `½ ln σ² + (y − μ)²/(2σ²)`, plus
/// `½ ln 2π` per sample when `include_constant` is set.
pub fn nll(preds: &[GaussianPrediction], targets: &[f64], include_constant: bool) -> Result<f64> {
    check_aligned(preds, targets)?;
    let mut total = 0.0;
    for (p, &y) in preds.iter().zip(targets) {
        let var = p.variance_total;
        if !(var > 0.0) {
            return Err(Error::InvalidArgument("NLL needs positive variances".into()));
        }
        total += 0.5 * var.ln() + (y - p.mean).powi(2) / (2.0 * var);
    }
    let mut mean = total / preds.len() as f64;
    if include_constant {
        mean += 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    #[default]
    Rmse,
    Mae,
}

impl ErrorMetric {
    fn name(self) -> &'static str {
        match self {
            Self::Rmse => "rmse",
            Self::Mae => "mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsificationOptions {
    /// Removal fraction increment.
    pub step: f64,
    pub metric: ErrorMetric,
    /// Number of shuffles averaged for the random baseline.
    pub random_repeats: usize,
    pub seed: u64,
}

impl Default for SparsificationOptions {
    fn default() -> Self {
        Self {
            step: 0.02,
            metric: ErrorMetric::Rmse,
            random_repeats: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationReport {
    pub metric: ErrorMetric,
    pub fractions: Vec<f64>,
    pub curve: Vec<f64>,
    pub oracle: Vec<f64>,
    pub random: Vec<f64>,
    pub ause: f64,
    pub aurg: f64,
}

/// Error of the remaining samples after removing the first `floor(f·N)`
/// entries of `order`, for each fraction.
fn removal_curve(order: &[usize], abs_errors: &[f64], fractions: &[f64], metric: ErrorMetric) -> Vec<f64> {
    let n = order.len();
    // suffix[k] = sum over order[k..]
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let e = abs_errors[order[k]];
        suffix[k] = suffix[k + 1]
            + match metric {
                ErrorMetric::Rmse => e * e,
                ErrorMetric::Mae => e,
            };
    }
    fractions
        .iter()
        .map(|&f| {
            let removed = (f * n as f64).floor() as usize;
            let mean = suffix[removed] / (n - removed) as f64;
            match metric {
                ErrorMetric::Rmse => mean.sqrt(),
                ErrorMetric::Mae => mean,
            }
        })
        .collect()
}

/// Indices sorted by descending key; ties keep index order.
fn descending(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    idx
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Sparsification curve for `uncertainties` against the error-ranked oracle
/// and a shuffled baseline. Removal fractions are `0, step, 2·step, …` below 1.
pub fn sparsification(uncertainties: &[f64], abs_errors: &[f64], opts: &SparsificationOptions) -> Result<SparsificationReport> {
    if uncertainties.len() != abs_errors.len() {
        return Err(Error::DimensionMismatch {
            expected: uncertainties.len(),
            actual: abs_errors.len(),
        });
    }
    let n = abs_errors.len();
    if n < 10 {
        return Err(Error::TooFewSamples { needed: 10, got: n });
    }
    if !(opts.step > 0.0 && opts.step < 1.0) {
        return Err(Error::InvalidArgument("removal step must lie in (0, 1)".into()));
    }
    let fractions: Vec<f64> = (0..)
        .map(|k| k as f64 * opts.step)
        .take_while(|&f| f < 1.0 - 1e-12)
        .collect();
    let curve = removal_curve(&descending(uncertainties), abs_errors, &fractions, opts.metric);
    let oracle = removal_curve(&descending(abs_errors), abs_errors, &fractions, opts.metric);
    let mut random = vec![0.0; fractions.len()];
    let repeats = opts.random_repeats.max(1);
    for r in 0..repeats {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(opts.seed, r as u64)));
        for (acc, v) in random.iter_mut().zip(removal_curve(&order, abs_errors, &fractions, opts.metric)) {
            *acc += v / repeats as f64;
        }
    }
    let gap: Vec<f64> = curve.iter().zip(&oracle).map(|(c, o)| c - o).collect();
    let gain: Vec<f64> = random.iter().zip(&curve).map(|(r, c)| r - c).collect();
    Ok(SparsificationReport {
        metric: opts.metric,
        ause: trapezoid(&fractions, &gap),
        aurg: trapezoid(&fractions, &gain),
        fractions,
        curve,
        oracle,
        random,
    })
}

impl SparsificationReport {
    /// Columns `fraction,<metric>,oracle,random`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(["fraction", self.metric.name(), "oracle", "random"]).map_err(csv_io)?;
        for i in 0..self.fractions.len() {
            w.write_record([
                self.fractions[i].to_string(),
                self.curve[i].to_string(),
                self.oracle[i].to_string(),
                self.random[i].to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pool-adjacent-violators fit: the nondecreasing sequence closest to `y` in
/// weighted least squares.
pub fn pav(y: &[f64], w: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        blocks.push((v, wt, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, w2, l2) = blocks.pop().unwrap();
            let (m1, w1, l1) = blocks.pop().unwrap();
            let wt = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / wt, wt, l1 + l2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, len)| std::iter::repeat_n(m, len))
        .collect()
}

/// Monotone piecewise-linear map on `[0, 1]` applied to predicted CDF
/// levels, with `R(0) = 0` and `R(1) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotonicMap {
    pub knots_x: Vec<f64>,
    pub knots_y: Vec<f64>,
}

pub const MIN_RECALIBRATION_SAMPLES: usize = 20;

/// Fits `R` so that recalibrated PIT values `R(u)` of the validation set
/// follow the uniform distribution: isotonic regression of the empirical CDF
/// of `u` on `u`.
pub fn isotonic_recalibrate(preds: &[GaussianPrediction], targets: &[f64]) -> Result<IsotonicMap> {
    check_aligned(preds, targets)?;
    if preds.len() < MIN_RECALIBRATION_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_RECALIBRATION_SAMPLES,
            got: preds.len(),
        });
    }
    let mut u: Vec<f64> = preds.iter().zip(targets).map(|(p, &y)| pit(p, y)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    let mut i = 0;
    while i < u.len() {
        let mut j = i;
        while j + 1 < u.len() && u[j + 1] == u[i] {
            j += 1;
        }
        xs.push(u[i]);
        ys.push((j + 1) as f64 / n);
        ws.push((j + 1 - i) as f64);
        i = j + 1;
    }
    let fitted = pav(&ys, &ws);
    let mut knots_x = vec![0.0];
    let mut knots_y = vec![0.0];
    for (x, y) in xs.into_iter().zip(fitted) {
        if x <= 0.0 || x >= 1.0 {
            continue;
        }
        knots_x.push(x);
        knots_y.push(y.clamp(0.0, 1.0).max(*knots_y.last().unwrap()));
    }
    knots_x.push(1.0);
    knots_y.push(1.0);
    Ok(IsotonicMap { knots_x, knots_y })
}

fn interpolate(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    if t <= xs[0] {
        return ys[0];
    }
    if t >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&x| x <= t);
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    if x1 == x0 {
        y1
    } else {
        y0 + (y1 - y0) * (t - x0) / (x1 - x0)
    }
}

impl IsotonicMap {
    pub fn identity() -> Self {
        Self {
            knots_x: vec![0.0, 1.0],
            knots_y: vec![0.0, 1.0],
        }
    }

    pub fn apply(&self, u: f64) -> f64 {
        interpolate(&self.knots_x, &self.knots_y, u.clamp(0.0, 1.0))
    }

    /// Smallest `u` with `R(u) = q`.
    pub fn inverse(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let k = self.knots_y.partition_point(|&y| y < q);
        if k == 0 {
            return self.knots_x[0];
        }
        if k >= self.knots_y.len() {
            return 1.0;
        }
        let (x0, x1, y0, y1) = (self.knots_x[k - 1], self.knots_x[k], self.knots_y[k - 1], self.knots_y[k]);
        x0 + (x1 - x0) * (q - y0) / (y1 - y0)
    }

    /// Calibration curve of `preds` after recalibration.
    pub fn calibration(
        &self,
        preds: &[GaussianPrediction],
        targets: &[f64],
        levels: &[f64],
        mode: CalibrationMode,
    ) -> Result<CalibrationCurve> {
        check_aligned(preds, targets)?;
        check_levels(levels)?;
        let u: Vec<f64> = preds.iter().zip(targets).map(|(p, &y)| self.apply(pit(p, y))).collect();
        Ok(curve_from_pits(&u, levels, mode))
    }

    /// Recalibrated central interval at confidence `c`, rebuilt from the
    /// recalibrated quantiles of the predicted Gaussian.
    pub fn interval(&self, pred: &GaussianPrediction, c: f64) -> (f64, f64) {
        let quantile = |q: f64| pred.mean + pred.std() * normal_quantile(self.inverse(q));
        (quantile((1.0 - c) / 2.0), quantile((1.0 + c) / 2.0))
    }
}
