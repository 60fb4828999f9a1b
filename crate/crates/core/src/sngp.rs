//! Distance-aware single-model uncertainty: a spectral-normalized residual
//! feature extractor topped either by a random Fourier feature GP head
//! (SNGP) or by an exact GP on the learned features (DNN-GPR).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gpr::{FitOptions, GpModel, SavedGpModel};
use crate::kernels::KernelSpec;
use crate::nnet::{LayerSpec, Loss, Network, NetworkSpec, OptimizerState, SavedNetwork, TrainConfig, TrainReport};
use crate::numerics::{cho_solve, cholesky, derive_seed, rng_from_seed, standard_normal, tri_solve, Matrix, Rng, Vector};
use crate::{Error, GaussianPrediction, Result};

const SCHEMA_VERSION: u32 = 1;

/// Default spectral bound of the hidden layers.
pub const DEFAULT_SPECTRAL_BOUND: f64 = 0.9;

/// Bayesian linear model on random Fourier features
/// `φ(h) = σf √(2/m) cos(Ω h + b)` with `Ω ~ N(0, I/l²)` and
/// `b ~ U[0, 2π)`, so that `φ(h)ᵀφ(h')` approximates the squared
/// exponential kernel. Weights have prior `N(0, I)`; the posterior precision
/// is `P = I + ΦᵀΦ/σε²`.
#[derive(Debug, Clone)]
pub struct RffHead {
    omega: Matrix,
    phases: Vec<f64>,
    sigma_f: f64,
    length_scale: f64,
    noise_std: f64,
    beta: Vector,
    offset: f64,
    precision: Matrix,
    chol: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// One pass over the full training set after training.
    #[default]
    Exact,
    /// Exponential moving average of minibatch estimates of `ΦᵀΦ` with the
    /// given momentum, over one shuffled pass.
    Momentum(f64),
}

impl RffHead {
    /// Head with freshly drawn projection and the prior posterior.
    pub fn new(input_dim: usize, n_features: usize, length_scale: f64, sigma_f: f64, noise_std: f64, seed: u64) -> Result<Self> {
        if n_features == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument("RFF head needs positive dimensions".into()));
        }
        if !(length_scale > 0.0) {
            return Err(Error::InvalidHyperparameter("length scale must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let omega = Matrix::from_fn(n_features, input_dim, |_, _| standard_normal(&mut rng) / length_scale);
        let phases = (0..n_features).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self::from_parts(omega, phases, length_scale, sigma_f, noise_std)
    }

    /// Head with a given projection (rows of `omega`) and phases.
    pub fn from_parts(omega: Matrix, phases: Vec<f64>, length_scale: f64, sigma_f: f64, noise_std: f64) -> Result<Self> {
        if phases.len() != omega.nrows() {
            return Err(Error::DimensionMismatch {
                expected: omega.nrows(),
                actual: phases.len(),
            });
        }
        if !(sigma_f > 0.0) || !(noise_std > 0.0) {
            return Err(Error::InvalidHyperparameter("sigma_f and noise_std must be positive".into()));
        }
        let m = omega.nrows();
        Ok(Self {
            omega,
            phases,
            sigma_f,
            length_scale,
            noise_std,
            beta: Vector::zeros(m),
            offset: 0.0,
            precision: Matrix::identity(m, m),
            chol: Matrix::identity(m, m),
        })
    }

    pub fn n_features(&self) -> usize {
        self.omega.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.omega.ncols()
    }

    pub fn omega(&self) -> &Matrix {
        &self.omega
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn beta(&self) -> &Vector {
        &self.beta
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn amplitude(&self) -> f64 {
        self.sigma_f * (2.0 / self.n_features() as f64).sqrt()
    }

    fn phase_args(&self, h: &[f64]) -> Vec<f64> {
        (0..self.n_features())
            .map(|k| self.phases[k] + self.omega.row(k).iter().zip(h).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn features(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: h.len(),
            });
        }
        let a = self.amplitude();
        Ok(self.phase_args(h).into_iter().map(|z| a * z.cos()).collect())
    }

    fn feature_matrix(&self, h: &Matrix) -> Result<Matrix> {
        let mut phi = Matrix::zeros(h.nrows(), self.n_features());
        for i in 0..h.nrows() {
            let row = self.features(&h.row(i).iter().copied().collect::<Vec<_>>())?;
            phi.row_mut(i).copy_from_slice(&row);
        }
        Ok(phi)
    }

    fn set_precision(&mut self, data_term: Matrix) -> Result<()> {
        let m = self.n_features();
        let precision = Matrix::identity(m, m) + data_term / (self.noise_std * self.noise_std);
        self.chol = cholesky(&precision)?;
        self.precision = precision;
        Ok(())
    }

    /// Exact posterior from features `phi` (one row per point) and targets.
    pub fn condition(&mut self, phi: &Matrix, y: &Vector) -> Result<()> {
        self.condition_mean(phi, y, phi.transpose() * phi)
    }

    fn condition_mean(&mut self, phi: &Matrix, y: &Vector, data_term: Matrix) -> Result<()> {
        if phi.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: phi.nrows(),
                actual: y.len(),
            });
        }
        self.set_precision(data_term)?;
        if y.is_empty() {
            self.offset = 0.0;
            self.beta = Vector::zeros(self.n_features());
            return Ok(());
        }
        self.offset = y.mean();
        let centered = y.add_scalar(-self.offset);
        let rhs = phi.transpose() * centered / (self.noise_std * self.noise_std);
        self.beta = cho_solve(&self.chol, &rhs)?;
        Ok(())
    }

    /// Mean `offset + βᵀφ`, epistemic `φᵀP⁻¹φ`, aleatory `σε²`.
    pub fn predict_features(&self, phi: &[f64]) -> Result<GaussianPrediction> {
        let phi = Vector::from_column_slice(phi);
        let mean = self.offset + self.beta.dot(&phi);
        let v = tri_solve(&self.chol, &phi, false)?;
        Ok(GaussianPrediction::new(mean, self.noise_std * self.noise_std, v.norm_squared()))
    }

    fn to_saved(&self) -> SavedRffHead {
        SavedRffHead {
            omega: crate::gpr::rows_of(&self.omega),
            phases: self.phases.clone(),
            length_scale: self.length_scale,
            sigma_f: self.sigma_f,
            noise_std: self.noise_std,
            beta: self.beta.iter().copied().collect(),
            offset: self.offset,
            precision: crate::gpr::rows_of(&self.precision),
        }
    }

    fn from_saved(s: SavedRffHead) -> Result<Self> {
        let h = s.omega.first().map_or(0, Vec::len);
        let omega = crate::gpr::matrix_from_rows(&s.omega, h)?;
        let mut head = Self::from_parts(omega, s.phases, s.length_scale, s.sigma_f, s.noise_std)?;
        let m = head.n_features();
        if s.beta.len() != m {
            return Err(Error::Schema("beta length does not match the feature count".into()));
        }
        let precision = crate::gpr::matrix_from_rows(&s.precision, m)?;
        if precision.nrows() != m {
            return Err(Error::Schema("precision shape does not match the feature count".into()));
        }
        head.chol = cholesky(&precision)?;
        head.precision = precision;
        head.beta = Vector::from_vec(s.beta);
        head.offset = s.offset;
        Ok(head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedRffHead {
    omega: Vec<Vec<f64>>,
    phases: Vec<f64>,
    length_scale: f64,
    sigma_f: f64,
    noise_std: f64,
    beta: Vec<f64>,
    offset: f64,
    precision: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SngpConfig {
    pub n_features: usize,
    pub length_scale: f64,
    pub sigma_f: f64,
    pub noise_std: f64,
    pub covariance: CovarianceMode,
    /// Joint extractor/head training. `Nll` is the Gaussian NLL with the
    /// fixed `noise_std`.
    pub train: TrainConfig,
}

impl Default for SngpConfig {
    fn default() -> Self {
        Self {
            n_features: 1024,
            length_scale: 1.0,
            sigma_f: 1.0,
            noise_std: 0.1,
            covariance: CovarianceMode::Exact,
            train: TrainConfig {
                loss: Loss::Mse,
                ..TrainConfig::default()
            },
        }
    }
}

/// Upper bound on the Lipschitz constant of the extractor: `γ` per
/// spectral dense layer and `1 + γ` per spectral residual block. `None`
/// when some hidden layer is not spectrally bounded.
pub fn extractor_lipschitz_bound(spec: &NetworkSpec) -> Option<f64> {
    let mut bound = 1.0;
    for layer in &spec.layers {
        match layer {
            LayerSpec::SpectralDense { bound: g, .. } => bound *= g,
            LayerSpec::Residual {
                spectral_bound: Some(g), ..
            } => bound *= 1.0 + g,
            LayerSpec::Dense { .. } | LayerSpec::Residual { .. } => return None,
            _ => {}
        }
    }
    Some(bound)
}

fn check_sngp_spec(spec: &NetworkSpec) -> Result<()> {
    spec.validate()?;
    if !spec.layers.iter().any(|l| matches!(l, LayerSpec::Residual { .. })) {
        return Err(Error::Schema("SNGP extractor needs at least one residual block".into()));
    }
    if spec.has_dropout() {
        return Err(Error::Schema("SNGP extractor must not contain dropout".into()));
    }
    if extractor_lipschitz_bound(spec).is_none() {
        return Err(Error::Schema("every hidden SNGP layer must be spectrally bounded".into()));
    }
    Ok(())
}

fn rows(x: &Matrix, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

fn extract(net: &Network, x: &Matrix) -> Result<Matrix> {
    let feats: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| net.features(&rows(x, i)))
        .collect::<Result<_>>()?;
    crate::gpr::matrix_from_rows(&feats, net.spec().feature_dim())
}

/// Spectral-normalized extractor plus RFF head. The extractor's own output
/// layer is unused.
#[derive(Debug, Clone)]
pub struct SngpModel {
    extractor: Network,
    head: RffHead,
    report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SngpBundle {
    schema_version: u32,
    extractor: SavedNetwork,
    head: SavedRffHead,
}

struct Trainer<'a> {
    head: &'a RffHead,
    beta: &'a [f64],
    offset: f64,
    loss: Loss,
}

impl Trainer<'_> {
    fn sample_loss(&self, r: f64) -> (f64, f64) {
        let s2 = self.head.noise_std * self.head.noise_std;
        match self.loss {
            Loss::Mse => (r * r, 2.0 * r),
            Loss::Nll => (0.5 * s2.ln() + r * r / (2.0 * s2), r / s2),
        }
    }

    /// Adds the gradient of one sample's scaled loss into `grad` (extractor
    /// part first, then `β`) and returns the loss.
    fn accumulate(&self, net: &Network, x: &[f64], y: f64, scale: f64, grad: &mut [f64]) -> f64 {
        let (net_grad, beta_grad) = grad.split_at_mut(net.n_params());
        let a = self.head.amplitude();
        let mut value = 0.0;
        net.features_with_grad(
            x,
            |h| {
                let z = self.head.phase_args(h);
                let phi: Vec<f64> = z.iter().map(|v| a * v.cos()).collect();
                let f = self.offset + phi.iter().zip(self.beta).map(|(p, b)| p * b).sum::<f64>();
                let (l, dl) = self.sample_loss(f - y);
                value = l;
                let mut dh = vec![0.0; h.len()];
                for k in 0..phi.len() {
                    beta_grad[k] += scale * dl * phi[k];
                    let c = -scale * dl * self.beta[k] * a * z[k].sin();
                    for (d, w) in dh.iter_mut().zip(self.head.omega.row(k).iter()) {
                        *d += c * w;
                    }
                }
                dh
            },
            net_grad,
        );
        value
    }

    fn full_loss(&self, net: &Network, x: &Matrix, y: &Vector) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let phi = self.head.features(&net.features(&rows(x, i))?)?;
            let f = self.offset + phi.iter().zip(self.beta).map(|(p, b)| p * b).sum::<f64>();
            total += self.sample_loss(f - y[i]).0;
        }
        Ok(total / x.nrows() as f64)
    }
}

impl SngpModel {
    /// Initializes the extractor from `seed`, trains it jointly with the
    /// head weights, then conditions the head on the whole training set.
    pub fn fit(spec: &NetworkSpec, x: &Matrix, y: &Vector, config: &SngpConfig, seed: u64) -> Result<Self> {
        check_sngp_spec(spec)?;
        config.train.validate()?;
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        let mut net = Network::new(spec.clone(), derive_seed(seed, 1))?;
        let mut head = RffHead::new(
            spec.feature_dim(),
            config.n_features,
            config.length_scale,
            config.sigma_f,
            config.noise_std,
            derive_seed(seed, 2),
        )?;
        let mut report = TrainReport::default();
        if !y.is_empty() && config.train.epochs > 0 {
            report = train_jointly(&mut net, &mut head, x, y, &config.train, derive_seed(seed, 3))?;
        }
        let mut model = Self::with_head(net, head, x, y, config.covariance, config.train.batch_size, derive_seed(seed, 4))?;
        model.report = report;
        Ok(model)
    }

    /// Conditions `head` on the features of a given extractor without
    /// training.
    pub fn from_extractor(extractor: Network, head: RffHead, x: &Matrix, y: &Vector) -> Result<Self> {
        Self::with_head(extractor, head, x, y, CovarianceMode::Exact, 1, 0)
    }

    fn with_head(
        extractor: Network,
        mut head: RffHead,
        x: &Matrix,
        y: &Vector,
        mode: CovarianceMode,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if head.input_dim() != extractor.spec().feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: extractor.spec().feature_dim(),
                actual: head.input_dim(),
            });
        }
        let phi = if x.nrows() == 0 {
            Matrix::zeros(0, head.n_features())
        } else {
            head.feature_matrix(&extract(&extractor, x)?)?
        };
        let data_term = match mode {
            CovarianceMode::Exact => phi.transpose() * &phi,
            CovarianceMode::Momentum(momentum) => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidHyperparameter("covariance momentum must lie in [0, 1)".into()));
                }
                let n = phi.nrows();
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng_from_seed(seed));
                let m = head.n_features();
                let mut acc = Matrix::zeros(m, m);
                for batch in order.chunks(batch_size.max(1)) {
                    let pb = Matrix::from_fn(batch.len(), m, |i, j| phi[(batch[i], j)]);
                    let estimate = pb.transpose() * pb * (n as f64 / batch.len() as f64);
                    acc = acc * momentum + estimate * (1.0 - momentum);
                }
                acc
            }
        };
        head.condition_mean(&phi, y, data_term)?;
        Ok(Self {
            extractor,
            head,
            report: TrainReport::default(),
        })
    }

    pub fn extractor(&self) -> &Network {
        &self.extractor
    }

    pub fn head(&self) -> &RffHead {
        &self.head
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<GaussianPrediction>> {
        (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let h = self.extractor.features(&rows(x, i))?;
                self.head.predict_features(&self.head.features(&h)?)
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bundle = SngpBundle {
            schema_version: SCHEMA_VERSION,
            extractor: self.extractor.to_saved(),
            head: self.head.to_saved(),
        };
        fs::write(path, serde_json::to_string(&bundle)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bundle: SngpBundle = serde_json::from_str(&fs::read_to_string(path)?)?;
        if bundle.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported SNGP schema version {}", bundle.schema_version)));
        }
        Ok(Self {
            extractor: Network::from_saved(bundle.extractor)?,
            head: RffHead::from_saved(bundle.head)?,
            report: TrainReport::default(),
        })
    }
}

fn train_jointly(net: &mut Network, head: &mut RffHead, x: &Matrix, y: &Vector, config: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let n_net = net.n_params();
    let m = head.n_features();
    let offset = y.mean();
    let mut theta: Vec<f64> = net.params().to_vec();
    theta.extend(std::iter::repeat_n(0.0, m));
    let mut optimizer = OptimizerState::new(config.optimizer, n_net + m);
    let mut rng: Rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let frozen = head.clone();
    let mut history = vec![Trainer { head: &frozen, beta: &theta[n_net..], offset, loss: config.loss }.full_loss(net, x, y)?];
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; n_net + m];
            let scale = 1.0 / batch.len() as f64;
            let t = Trainer { head: &frozen, beta: &theta[n_net..], offset, loss: config.loss };
            let mut value = 0.0;
            for &i in batch {
                value += scale * t.accumulate(net, &rows(x, i), y[i], scale, &mut grad);
            }
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            optimizer.step(&mut theta, &grad, config.learning_rate);
            net.set_params(&theta[..n_net])?;
            net.spectral_normalize();
            theta[..n_net].copy_from_slice(net.params());
        }
        let value = Trainer { head: &frozen, beta: &theta[n_net..], offset, loss: config.loss }.full_loss(net, x, y)?;
        if !value.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(value);
    }
    head.beta = Vector::from_column_slice(&theta[n_net..]);
    Ok(TrainReport { loss_history: history })
}

/// Exact GP regression on the features of a fixed extractor (deep kernel).
#[derive(Debug, Clone)]
pub struct DnnGpr {
    extractor: Network,
    gp: GpModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DnnGprBundle {
    schema_version: u32,
    extractor: SavedNetwork,
    gp: SavedGpModel,
}

impl DnnGpr {
    pub fn fit(extractor: Network, x: &Matrix, y: &Vector, kernel: KernelSpec, noise_std: f64, options: &FitOptions, rng: &mut Rng) -> Result<Self> {
        let h = extract(&extractor, x)?;
        let gp = GpModel::fit(h, y.clone(), kernel, noise_std, options, rng)?;
        Ok(Self { extractor, gp })
    }

    pub fn extractor(&self) -> &Network {
        &self.extractor
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    /// Extractor features of every row of `x`.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        extract(&self.extractor, x)
    }

    pub fn predict(&self, x: &Matrix, include_noise: bool) -> Result<Vec<GaussianPrediction>> {
        self.gp.predict(&self.features(x)?, include_noise)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bundle = DnnGprBundle {
            schema_version: SCHEMA_VERSION,
            extractor: self.extractor.to_saved(),
            gp: self.gp.to_saved(),
        };
        fs::write(path, serde_json::to_string(&bundle)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bundle: DnnGprBundle = serde_json::from_str(&fs::read_to_string(path)?)?;
        if bundle.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported DNN-GPR schema version {}", bundle.schema_version)));
        }
        Ok(Self {
            extractor: Network::from_saved(bundle.extractor)?,
            gp: GpModel::from_saved(bundle.gp)?,
        })
    }
}
