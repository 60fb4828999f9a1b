use serde::{Deserialize, Serialize};

/// Predictive Gaussian at one input, with the total variance split into an
/// aleatory (observation noise) and an epistemic (model) part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub variance_total: f64,
    pub variance_aleatory: f64,
    pub variance_epistemic: f64,
    /// `false` when the method cannot separate the two sources (MC dropout
    /// on a scalar-output network); the whole variance then sits in
    /// `variance_epistemic`.
    pub split_available: bool,
}

fn clamp_variance(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

impl GaussianPrediction {
    pub fn new(mean: f64, variance_aleatory: f64, variance_epistemic: f64) -> Self {
        let variance_aleatory = clamp_variance(variance_aleatory);
        let variance_epistemic = clamp_variance(variance_epistemic);
        Self {
            mean,
            variance_total: variance_aleatory + variance_epistemic,
            variance_aleatory,
            variance_epistemic,
            split_available: true,
        }
    }

    /// Prediction that only carries a total variance.
    pub fn total_only(mean: f64, variance_total: f64) -> Self {
        let v = clamp_variance(variance_total);
        Self {
            mean,
            variance_total: v,
            variance_aleatory: 0.0,
            variance_epistemic: v,
            split_available: false,
        }
    }

    pub fn std(&self) -> f64 {
        self.variance_total.sqrt()
    }

    /// Moment-matched Gaussian of an equal-weight mixture of `(mean, variance)`
    /// components: aleatory is the mean component variance, epistemic the
    /// spread of component means.
    pub fn from_mixture(components: &[(f64, f64)]) -> Self {
        let m = components.len() as f64;
        let mean = components.iter().map(|c| c.0).sum::<f64>() / m;
        let aleatory = components.iter().map(|c| c.1).sum::<f64>() / m;
        let epistemic = components.iter().map(|c| (c.0 - mean).powi(2)).sum::<f64>() / m;
        Self::new(mean, aleatory, epistemic)
    }

    /// Same prediction with the aleatory part dropped.
    pub fn without_noise(&self) -> Self {
        Self::new(self.mean, 0.0, self.variance_epistemic)
    }
}
