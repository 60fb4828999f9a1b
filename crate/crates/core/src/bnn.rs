//! Posterior inference over network parameters: Metropolis-Hastings,
//! mean-field variational inference, Stein variational gradient descent,
//! MC dropout and posterior-predictive aggregation.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::csv_io;
use crate::nnet::{Loss, Mode, Network, OutputKind, Optimizer};
use crate::numerics::{rng_from_seed, sample_variance, standard_normal, Matrix, Rng, Vector};
use crate::{Error, GaussianPrediction, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// An unnormalized log density with its gradient.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// A likelihood paired with an isotropic `N(0, prior_std²)` prior.
pub trait BayesModel: Sync {
    fn dim(&self) -> usize;
    fn log_likelihood(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn prior_std(&self) -> f64;
}

/// Normalized Gaussian log prior and its gradient.
pub fn log_prior(theta: &[f64], prior_std: f64) -> (f64, Vec<f64>) {
    let s2 = prior_std * prior_std;
    let k = theta.len() as f64;
    let value = -0.5 * k * (LN_2PI + s2.ln()) - theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * s2);
    (value, theta.iter().map(|t| -t / s2).collect())
}

/// Log likelihood plus log prior.
pub fn log_posterior<M: BayesModel + ?Sized>(model: &M, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    if theta.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: theta.len(),
        });
    }
    let (ll, mut grad) = model.log_likelihood(theta)?;
    let (lp, gp) = log_prior(theta, model.prior_std());
    for (g, p) in grad.iter_mut().zip(gp) {
        *g += p;
    }
    Ok((ll + lp, grad))
}

/// The posterior of a [`BayesModel`] viewed as a [`LogDensity`].
pub struct Posterior<'a, M: ?Sized>(pub &'a M);

impl<M: BayesModel + ?Sized> LogDensity for Posterior<'_, M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_density(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        log_posterior(self.0, theta)
    }
}

/// Adapter turning a closure into a [`LogDensity`].
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> LogDensity for FnDensity<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.f)(theta))
    }
}

/// Adapter turning a log-likelihood closure into a [`BayesModel`].
pub struct FnModel<F> {
    pub dim: usize,
    pub prior_std: f64,
    pub f: F,
}

impl<F> BayesModel for FnModel<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_likelihood(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.f)(theta))
    }

    fn prior_std(&self) -> f64 {
        self.prior_std
    }
}

/// Posterior over the parameters of a network on a dataset. Scalar-output
/// networks use a homoscedastic Gaussian likelihood with `noise_std`;
/// Gaussian-output networks use their own predicted variance.
#[derive(Debug, Clone)]
pub struct NetworkPosterior {
    net: Network,
    x: Matrix,
    y: Vector,
    prior_std: f64,
    noise_std: f64,
}

impl NetworkPosterior {
    pub fn new(net: Network, x: Matrix, y: Vector, prior_std: f64, noise_std: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        if x.nrows() > 0 && x.ncols() != net.spec().input_dim {
            return Err(Error::DimensionMismatch {
                expected: net.spec().input_dim,
                actual: x.ncols(),
            });
        }
        if !(prior_std > 0.0) || !(noise_std > 0.0) {
            return Err(Error::InvalidHyperparameter(
                "prior and noise standard deviations must be positive".into(),
            ));
        }
        Ok(Self {
            net,
            x,
            y,
            prior_std,
            noise_std,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }
}

impl BayesModel for NetworkPosterior {
    fn dim(&self) -> usize {
        self.net.n_params()
    }

    fn log_likelihood(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.y.len() as f64;
        if self.y.is_empty() {
            return Ok((0.0, vec![0.0; theta.len()]));
        }
        let net = self.net.with_params(theta)?;
        match net.spec().output_kind() {
            OutputKind::Scalar => {
                let s2 = self.noise_std * self.noise_std;
                let (mse, g) = net.loss_and_grad(&self.x, &self.y, Loss::Mse)?;
                let value = -0.5 * n * (LN_2PI + s2.ln()) - n * mse / (2.0 * s2);
                Ok((value, g.iter().map(|v| -n * v / (2.0 * s2)).collect()))
            }
            OutputKind::Gaussian => {
                let (nll, g) = net.loss_and_grad(&self.x, &self.y, Loss::Nll)?;
                Ok((-0.5 * n * LN_2PI - n * nll, g.iter().map(|v| -n * v).collect()))
            }
        }
    }

    fn prior_std(&self) -> f64 {
        self.prior_std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhOptions {
    pub proposal_std: f64,
    /// Leading steps during which the proposal scale is tuned towards a 0.3
    /// acceptance rate; these steps are not recorded.
    pub adapt_steps: usize,
    /// Keep every `thin`-th recorded state.
    pub thin: usize,
}

impl Default for MhOptions {
    fn default() -> Self {
        Self {
            proposal_std: 0.1,
            adapt_steps: 0,
            thin: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// One row per kept state.
    pub samples: Matrix,
    /// Acceptance rate over the recorded steps.
    pub acceptance_rate: f64,
    /// Proposal scale used for the recorded steps.
    pub proposal_std: f64,
}

/// Random-walk Metropolis-Hastings with an isotropic Gaussian proposal.
/// `steps` states after adaptation are recorded (then thinned).
pub fn mh_sample(target: &dyn LogDensity, theta0: &[f64], steps: usize, opts: &MhOptions, rng: &mut Rng) -> Result<Chain> {
    if steps == 0 {
        return Err(Error::InvalidArgument("MH needs at least one step".into()));
    }
    if theta0.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            actual: theta0.len(),
        });
    }
    let thin = opts.thin.max(1);
    let mut theta = theta0.to_vec();
    let mut current = target.log_density(&theta)?.0;
    let mut log_scale = opts.proposal_std.ln();
    let mut proposal = vec![0.0; theta.len()];
    let mut step = |theta: &mut Vec<f64>, current: &mut f64, scale: f64, rng: &mut Rng| -> Result<bool> {
        for (p, t) in proposal.iter_mut().zip(theta.iter()) {
            *p = t + scale * standard_normal(rng);
        }
        let candidate = target.log_density(&proposal)?.0;
        let log_u = rng.random::<f64>().ln();
        if log_u < candidate - *current {
            theta.copy_from_slice(&proposal);
            *current = candidate;
            Ok(true)
        } else {
            Ok(false)
        }
    };
    for t in 0..opts.adapt_steps {
        let accepted = step(&mut theta, &mut current, log_scale.exp(), rng)?;
        let rate = if accepted { 1.0 } else { 0.0 };
        log_scale += (rate - 0.3) / ((t + 1) as f64).sqrt();
    }
    let scale = if opts.adapt_steps > 0 {
        log_scale.exp()
    } else {
        opts.proposal_std
    };
    let kept = steps.div_ceil(thin);
    let mut samples = Matrix::zeros(kept, theta.len());
    let mut accepted = 0usize;
    for t in 0..steps {
        if step(&mut theta, &mut current, scale, rng)? {
            accepted += 1;
        }
        if t % thin == 0 {
            samples.row_mut(t / thin).copy_from_slice(&theta);
        }
    }
    Ok(Chain {
        samples,
        acceptance_rate: accepted as f64 / steps as f64,
        proposal_std: scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfviConfig {
    /// Reparameterized draws per ELBO estimate.
    pub n_mc: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Initial standard deviation of every factor.
    pub init_std: f64,
}

impl Default for MfviConfig {
    fn default() -> Self {
        Self {
            n_mc: 1,
            epochs: 2000,
            learning_rate: 0.01,
            init_std: 0.1,
        }
    }
}

/// Independent Gaussian factors `N(mean_k, exp(log_std_k)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfviPosterior {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Monte Carlo ELBO estimate per epoch.
    #[serde(default)]
    pub elbo_history: Vec<f64>,
}

/// `KL(N(μ, σ²) ‖ N(0, s²))` summed over factors, with gradients in `μ` and
/// `ln σ`.
pub fn gaussian_kl(mean: &[f64], log_std: &[f64], prior_std: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let s2 = prior_std * prior_std;
    let mut kl = 0.0;
    let mut g_mean = Vec::with_capacity(mean.len());
    let mut g_log_std = Vec::with_capacity(mean.len());
    for (&m, &r) in mean.iter().zip(log_std) {
        let v = (2.0 * r).exp();
        kl += prior_std.ln() - r + (v + m * m) / (2.0 * s2) - 0.5;
        g_mean.push(m / s2);
        g_log_std.push(v / s2 - 1.0);
    }
    (kl, g_mean, g_log_std)
}

impl MfviPosterior {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|r| r.exp()).collect()
    }

    /// `n` draws, one per row.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Matrix {
        let k = self.mean.len();
        let std = self.std();
        Matrix::from_fn(n, k, |_, j| self.mean[j] + std[j] * standard_normal(rng))
    }
}

/// Maximizes the ELBO `E_q[log p(y|θ)] − KL(q ‖ prior)` with Adam, using
/// reparameterized draws `θ = μ + σ ⊙ ζ`.
pub fn mfvi_fit<M: BayesModel + ?Sized>(model: &M, init_mean: &[f64], config: &MfviConfig, rng: &mut Rng) -> Result<MfviPosterior> {
    if config.n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    let k = model.dim();
    if init_mean.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: init_mean.len(),
        });
    }
    if !(config.init_std > 0.0) {
        return Err(Error::InvalidHyperparameter("init_std must be positive".into()));
    }
    // variational parameters laid out as [μ; ln σ]
    let mut lambda: Vec<f64> = init_mean.to_vec();
    lambda.extend(std::iter::repeat_n(config.init_std.ln(), k));
    let mut optimizer = crate::nnet::OptimizerState::new(Optimizer::Adam, 2 * k);
    let mut history = Vec::with_capacity(config.epochs);
    let mut theta = vec![0.0; k];
    let mut zeta = vec![0.0; k];
    for epoch in 1..=config.epochs {
        let (mean, log_std) = lambda.split_at(k);
        let (kl, kl_mean, kl_log_std) = gaussian_kl(mean, log_std, model.prior_std());
        let mut expected_ll = 0.0;
        let mut grad = vec![0.0; 2 * k];
        for _ in 0..config.n_mc {
            for j in 0..k {
                zeta[j] = standard_normal(rng);
                theta[j] = mean[j] + log_std[j].exp() * zeta[j];
            }
            let (ll, g) = model.log_likelihood(&theta)?;
            expected_ll += ll / config.n_mc as f64;
            for j in 0..k {
                grad[j] += g[j] / config.n_mc as f64;
                grad[k + j] += g[j] * log_std[j].exp() * zeta[j] / config.n_mc as f64;
            }
        }
        let elbo = expected_ll - kl;
        // descend on −ELBO
        for j in 0..k {
            grad[j] = kl_mean[j] - grad[j];
            grad[k + j] = kl_log_std[j] - grad[k + j];
        }
        if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        history.push(elbo);
        optimizer.step(&mut lambda, &grad, config.learning_rate);
    }
    let log_std = lambda.split_off(k);
    Ok(MfviPosterior {
        mean: lambda,
        log_std,
        elbo_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `h = median(‖θᵢ − θⱼ‖²) / ln(Np + 1)`, recomputed every step.
    #[default]
    Median,
    Fixed(f64),
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn resolve_bandwidth(particles: &Matrix, rule: Bandwidth) -> f64 {
    let h = match rule {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => {
            let np = particles.nrows();
            let rows: Vec<Vec<f64>> = (0..np).map(|i| particles.row(i).iter().copied().collect()).collect();
            let mut d: Vec<f64> = Vec::with_capacity(np * (np - 1) / 2);
            for i in 0..np {
                for j in 0..i {
                    d.push(squared_distance(&rows[i], &rows[j]));
                }
            }
            if d.is_empty() {
                return 1.0;
            }
            d.sort_by(f64::total_cmp);
            let mid = d.len() / 2;
            let median = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
            median / ((np + 1) as f64).ln()
        }
    };
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1.0
    }
}

/// The SVGD direction
/// `φ(θ) = (1/Np) Σⱼ [k(θⱼ, θ) ∇log p(θⱼ) + ∇_{θⱼ} k(θⱼ, θ)]` for every
/// particle (one per row), with the RBF kernel `k(a, b) = exp(−‖a − b‖²/h)`.
pub fn svgd_direction(particles: &Matrix, target: &dyn LogDensity, bandwidth: Bandwidth) -> Result<Matrix> {
    let np = particles.nrows();
    if np == 0 {
        return Err(Error::EmptyData);
    }
    if particles.ncols() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            actual: particles.ncols(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..np).map(|i| particles.row(i).iter().copied().collect()).collect();
    let grads: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|r| target.log_density(r).map(|(_, g)| g))
        .collect::<Result<_>>()?;
    let h = resolve_bandwidth(particles, bandwidth);
    let k = particles.ncols();
    let phi: Vec<Vec<f64>> = (0..np)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; k];
            for j in 0..np {
                let kij = (-squared_distance(&rows[j], &rows[i]) / h).exp();
                for d in 0..k {
                    let repulse = -2.0 * (rows[j][d] - rows[i][d]) / h * kij;
                    acc[d] += kij * grads[j][d] + repulse;
                }
            }
            acc.iter().map(|v| v / np as f64).collect()
        })
        .collect();
    Ok(Matrix::from_fn(np, k, |i, d| phi[i][d]))
}

/// One plain SVGD update `θᵢ ← θᵢ + lr·φ(θᵢ)`.
pub fn svgd_step(particles: &mut Matrix, target: &dyn LogDensity, lr: f64, bandwidth: Bandwidth) -> Result<()> {
    let phi = svgd_direction(particles, target, bandwidth)?;
    for (p, g) in particles.iter_mut().zip(phi.iter()) {
        *p += lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvgdConfig {
    pub n_particles: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub bandwidth: Bandwidth,
    /// Spread of the initial particles around the starting point.
    pub init_std: f64,
    /// Per-coordinate AdaGrad scaling of the step with this history decay;
    /// `None` takes plain `lr·φ` steps.
    pub adagrad_decay: Option<f64>,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        Self {
            n_particles: 20,
            steps: 500,
            learning_rate: 0.05,
            bandwidth: Bandwidth::Median,
            init_std: 0.1,
            adagrad_decay: Some(0.9),
        }
    }
}

/// Runs `config.steps` SVGD updates from particles scattered around `center`.
pub fn svgd_fit(target: &dyn LogDensity, center: &[f64], config: &SvgdConfig, rng: &mut Rng) -> Result<Matrix> {
    if config.n_particles == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    let mut particles = Matrix::from_fn(config.n_particles, center.len(), |_, j| {
        center[j] + config.init_std * standard_normal(rng)
    });
    let mut history: Option<Matrix> = None;
    for step in 1..=config.steps {
        match config.adagrad_decay {
            None => svgd_step(&mut particles, target, config.learning_rate, config.bandwidth)?,
            Some(decay) => {
                let phi = svgd_direction(&particles, target, config.bandwidth)?;
                let sq = phi.map(|v| v * v);
                let h = match history.take() {
                    None => sq,
                    Some(h) => h * decay + sq * (1.0 - decay),
                };
                particles += phi.zip_map(&h, |g, v| config.learning_rate * g / (1e-6 + v.sqrt()));
                history = Some(h);
            }
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch: step });
        }
    }
    Ok(particles)
}

/// Writes parameter samples as CSV with columns `theta0, theta1, …`.
pub fn write_samples_csv(samples: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record((0..samples.ncols()).map(|j| format!("theta{j}"))).map_err(csv_io)?;
    for i in 0..samples.nrows() {
        w.write_record(samples.row(i).iter().map(|v| v.to_string())).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// `t` stochastic forward passes per input with dropout active. Gaussian
/// heads are aggregated as an equal-weight mixture; scalar heads report the
/// unbiased sample variance as a total without a split.
pub fn mc_dropout_predict(net: &Network, x: &Matrix, t: usize, rng: &mut Rng) -> Result<Vec<GaussianPrediction>> {
    if !net.spec().has_dropout() {
        return Err(Error::NoDropout);
    }
    if t < 2 {
        return Err(Error::InvalidArgument("MC dropout needs at least 2 passes".into()));
    }
    let seeds: Vec<u64> = (0..x.nrows()).map(|_| rng.random()).collect();
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut local = rng_from_seed(seed);
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let mut outs = Vec::with_capacity(t);
            for _ in 0..t {
                outs.push(net.forward(&xi, Mode::EvalWithDropout, &mut local)?);
            }
            Ok(match net.spec().output_kind() {
                OutputKind::Gaussian => {
                    let comps: Vec<(f64, f64)> = outs.iter().map(|o| (o.mean, o.variance.unwrap_or(0.0))).collect();
                    GaussianPrediction::from_mixture(&comps)
                }
                OutputKind::Scalar => {
                    let means: Vec<f64> = outs.iter().map(|o| o.mean).collect();
                    let mean = means.iter().sum::<f64>() / t as f64;
                    GaussianPrediction::total_only(mean, sample_variance(&means))
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveMode {
    /// Distribution of `f(x; θ)` only.
    Pushforward,
    /// Adds observation noise to the pushforward.
    Predictive,
}

/// Aggregates network outputs over parameter samples (one per row).
/// The epistemic part is the unbiased sample variance of the outputs. In
/// predictive mode the aleatory part is `noise_std²` for scalar heads and the
/// mean predicted variance for Gaussian heads.
pub fn posterior_predict(
    net: &Network,
    samples: &Matrix,
    x: &Matrix,
    noise_std: f64,
    mode: PredictiveMode,
) -> Result<Vec<GaussianPrediction>> {
    if samples.nrows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.nrows(),
        });
    }
    let nets: Vec<Network> = (0..samples.nrows())
        .map(|s| net.with_params(samples.row(s).iter().copied().collect::<Vec<_>>().as_slice()))
        .collect::<Result<_>>()?;
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let outs = nets.iter().map(|n| n.predict(&xi)).collect::<Result<Vec<_>>>()?;
            let means: Vec<f64> = outs.iter().map(|o| o.mean).collect();
            let mean = means.iter().sum::<f64>() / means.len() as f64;
            let epistemic = sample_variance(&means);
            let aleatory = match (mode, net.spec().output_kind()) {
                (PredictiveMode::Pushforward, _) => 0.0,
                (PredictiveMode::Predictive, OutputKind::Scalar) => noise_std * noise_std,
                (PredictiveMode::Predictive, OutputKind::Gaussian) => {
                    outs.iter().map(|o| o.variance.unwrap_or(0.0)).sum::<f64>() / outs.len() as f64
                }
            };
            Ok(GaussianPrediction::new(mean, aleatory, epistemic))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Activation, LayerSpec, NetworkSpec};
    use crate::numerics::rng_from_seed;
    use approx::assert_relative_eq;

    fn linear_net() -> Network {
        Network::from_params(NetworkSpec { input_dim: 1, layers: vec![LayerSpec::ScalarOutput] }, vec![0.0, 0.0]).unwrap()
    }

    fn std_normal_target(dim: usize) -> FnDensity<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
        FnDensity {
            dim,
            f: |t: &[f64]| (-0.5 * t.iter().map(|v| v * v).sum::<f64>(), t.iter().map(|v| -v).collect()),
        }
    }

    /// Zero-mean Gaussian with unit variances and correlation `rho`.
    fn correlated_target(rho: f64) -> FnDensity<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
        let det = 1.0 - rho * rho;
        FnDensity {
            dim: 2,
            f: move |t: &[f64]| {
                let (a, b) = (t[0], t[1]);
                let q = (a * a - 2.0 * rho * a * b + b * b) / det;
                (-0.5 * q, vec![-(a - rho * b) / det, -(b - rho * a) / det])
            },
        }
    }

    #[test]
    fn zero_output_log_posterior_closed_form() {
        let x = Matrix::from_vec(3, 1, vec![0.5, -1.0, 2.0]);
        let y = Vector::from_vec(vec![0.3, -0.2, 1.1]);
        let sigma = 0.7;
        let post = NetworkPosterior::new(linear_net(), x, y.clone(), 1.0, sigma).unwrap();
        let (value, _) = post.log_likelihood(&[0.0, 0.0]).unwrap();
        let expected = -3.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma).ln() - y.norm_squared() / (2.0 * sigma * sigma);
        assert_relative_eq!(value, expected, epsilon = 1e-12);
        let (lp, _) = log_posterior(&post, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(lp, expected + log_prior(&[0.0, 0.0], 1.0).0, epsilon = 1e-12);
    }

    #[test]
    fn empty_dataset_is_prior_only() {
        let post = NetworkPosterior::new(linear_net(), Matrix::zeros(0, 1), Vector::zeros(0), 2.0, 0.1).unwrap();
        let theta = [0.4, -1.0];
        assert_eq!(log_posterior(&post, &theta).unwrap(), log_prior(&theta, 2.0));
        assert_relative_eq!(log_prior(&[0.0], 1.0).0, -0.5 * LN_2PI, epsilon = 1e-15);
    }

    fn check_posterior_gradient(post: &NetworkPosterior, theta: &[f64]) {
        let (_, g) = log_posterior(post, theta).unwrap();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut up = theta.to_vec();
            up[i] += h;
            let mut dn = theta.to_vec();
            dn[i] -= h;
            let fd = (log_posterior(post, &up).unwrap().0 - log_posterior(post, &dn).unwrap().0) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn log_posterior_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(2);
        for (k, head) in [LayerSpec::ScalarOutput, LayerSpec::GaussianOutput].into_iter().enumerate() {
            let spec = NetworkSpec {
                input_dim: 2,
                layers: vec![LayerSpec::Dense { width: 4, activation: Activation::Tanh }, head],
            };
            let net = Network::new(spec, k as u64).unwrap();
            let x = Matrix::from_fn(6, 2, |_, _| standard_normal(&mut rng));
            let y = Vector::from_fn(6, |_, _| standard_normal(&mut rng));
            let post = NetworkPosterior::new(net.clone(), x, y, 1.5, 0.3).unwrap();
            for _ in 0..3 {
                let theta: Vec<f64> = (0..net.n_params()).map(|_| 0.5 * standard_normal(&mut rng)).collect();
                check_posterior_gradient(&post, &theta);
            }
        }
    }

    #[test]
    fn mh_standard_normal() {
        let target = std_normal_target(1);
        let chain = mh_sample(&target, &[0.0], 100_000, &MhOptions { proposal_std: 1.0, ..Default::default() }, &mut rng_from_seed(3)).unwrap();
        let xs: Vec<f64> = chain.samples.column(0).iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((sample_variance(&xs) - 1.0).abs() < 0.1);
        assert!(chain.acceptance_rate > 0.3 && chain.acceptance_rate < 0.9);
    }

    #[test]
    fn mh_degenerate_proposal_and_determinism() {
        let target = std_normal_target(2);
        let opts = MhOptions { proposal_std: 0.0, ..Default::default() };
        let chain = mh_sample(&target, &[0.7, -0.2], 100, &opts, &mut rng_from_seed(4)).unwrap();
        assert_eq!(chain.acceptance_rate, 1.0);
        assert!(chain.samples.row_iter().all(|r| r[0] == 0.7 && r[1] == -0.2));
        let opts = MhOptions { proposal_std: 0.5, ..Default::default() };
        let a = mh_sample(&target, &[0.0, 0.0], 500, &opts, &mut rng_from_seed(5)).unwrap();
        let b = mh_sample(&target, &[0.0, 0.0], 500, &opts, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mh_recovers_correlation() {
        let target = correlated_target(0.8);
        let chain = mh_sample(&target, &[0.0, 0.0], 100_000, &MhOptions { proposal_std: 0.5, adapt_steps: 2000, thin: 1 }, &mut rng_from_seed(6)).unwrap();
        let a: Vec<f64> = chain.samples.column(0).iter().copied().collect();
        let b: Vec<f64> = chain.samples.column(1).iter().copied().collect();
        let (ma, mb) = (a.iter().sum::<f64>() / a.len() as f64, b.iter().sum::<f64>() / b.len() as f64);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64;
        let rho = cov / (sample_variance(&a) * sample_variance(&b)).sqrt();
        assert!((rho - 0.8).abs() < 0.05, "{rho}");
        assert!((chain.acceptance_rate - 0.3).abs() < 0.1);
    }

    fn conjugate_model(n: usize, seed: u64) -> (FnModel<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync>, f64, f64) {
        let mut rng = rng_from_seed(seed);
        let data: Vec<f64> = (0..n).map(|_| 1.3 + standard_normal(&mut rng)).collect();
        let sum: f64 = data.iter().sum();
        let post_mean = sum / (n as f64 + 1.0);
        let post_std = (1.0 / (n as f64 + 1.0)).sqrt();
        let model = FnModel {
            dim: 1,
            prior_std: 1.0,
            f: move |t: &[f64]| {
                let m = t[0];
                let ll = data.iter().map(|y| -0.5 * (y - m).powi(2)).sum::<f64>() - 0.5 * n as f64 * LN_2PI;
                (ll, vec![sum - n as f64 * m])
            },
        };
        (model, post_mean, post_std)
    }

    #[test]
    fn mfvi_conjugate_mean() {
        let (model, mean, std) = conjugate_model(50, 7);
        let config = MfviConfig { n_mc: 4, epochs: 3000, learning_rate: 0.01, init_std: 0.5 };
        let q = mfvi_fit(&model, &[0.0], &config, &mut rng_from_seed(8)).unwrap();
        assert!((q.mean[0] - mean).abs() < 0.05, "{} vs {mean}", q.mean[0]);
        assert!((q.std()[0] - std).abs() < 0.2 * std, "{} vs {std}", q.std()[0]);
        let smooth = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let h = &q.elbo_history;
        assert!(smooth(&h[h.len() - 50..]) >= smooth(&h[..50]));
    }

    #[test]
    fn mfvi_without_data_returns_to_prior() {
        let model = FnModel { dim: 3, prior_std: 1.0, f: |t: &[f64]| (0.0, vec![0.0; t.len()]) };
        let config = MfviConfig { n_mc: 1, epochs: 3000, learning_rate: 0.02, init_std: 0.2 };
        let q = mfvi_fit(&model, &[1.0, -0.5, 0.2], &config, &mut rng_from_seed(9)).unwrap();
        assert!(gaussian_kl(&q.mean, &q.log_std, 1.0).0 < 0.01);
        assert!(gaussian_kl(&[0.0], &[0.0], 1.0).0.abs() < 1e-15);
    }

    #[test]
    fn svgd_single_particle_is_gradient_ascent() {
        let target = correlated_target(0.5);
        let start = [0.3, -1.2];
        let mut particles = Matrix::from_row_slice(1, 2, &start);
        svgd_step(&mut particles, &target, 0.1, Bandwidth::Median).unwrap();
        let (_, g) = target.log_density(&start).unwrap();
        assert_eq!(particles[(0, 0)], start[0] + 0.1 * g[0]);
        assert_eq!(particles[(0, 1)], start[1] + 0.1 * g[1]);
    }

    #[test]
    fn svgd_coincident_particles_move_together() {
        let target = correlated_target(0.5);
        let mut particles = Matrix::from_row_slice(2, 2, &[0.3, -1.2, 0.3, -1.2]);
        svgd_step(&mut particles, &target, 0.1, Bandwidth::Median).unwrap();
        assert_eq!(particles.row(0), particles.row(1));
    }

    #[test]
    fn svgd_matches_gaussian_target() {
        let target = correlated_target(0.6);
        let config = SvgdConfig { n_particles: 30, steps: 500, learning_rate: 0.1, init_std: 1.0, ..Default::default() };
        let p = svgd_fit(&target, &[1.0, 1.0], &config, &mut rng_from_seed(10)).unwrap();
        let mean = p.row_mean();
        assert!(mean.norm() < 0.1 * 2f64.sqrt(), "{mean}");
        let c = p.clone() - Matrix::from_fn(30, 2, |_, j| mean[j]);
        let cov = c.transpose() * &c / 29.0;
        for (got, want) in [(cov[(0, 0)], 1.0), (cov[(1, 1)], 1.0), (cov[(0, 1)], 0.6)] {
            assert!((got - want).abs() < 0.25 * want, "{cov}");
        }
    }

    #[test]
    fn svgd_is_permutation_equivariant() {
        let target = correlated_target(0.3);
        let mut rng = rng_from_seed(11);
        let a = Matrix::from_fn(5, 2, |_, _| standard_normal(&mut rng));
        let perm = [3, 0, 4, 1, 2];
        let mut b = Matrix::from_fn(5, 2, |i, j| a[(perm[i], j)]);
        let mut a2 = a.clone();
        svgd_step(&mut a2, &target, 0.05, Bandwidth::Median).unwrap();
        svgd_step(&mut b, &target, 0.05, Bandwidth::Median).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                assert!((b[(i, j)] - a2[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }

    fn dropout_unit(rate: f64) -> Network {
        let spec = NetworkSpec { input_dim: 1, layers: vec![LayerSpec::Dropout { rate }, LayerSpec::ScalarOutput] };
        Network::from_params(spec, vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn mc_dropout_bernoulli_moments() {
        let p = 0.2;
        let x = Matrix::from_element(1, 1, 1.0);
        let pred = mc_dropout_predict(&dropout_unit(p), &x, 100_000, &mut rng_from_seed(12)).unwrap()[0];
        assert!((pred.mean - 1.0).abs() < 0.01);
        assert!((pred.variance_total - p / (1.0 - p)).abs() < 0.01);
        assert!(!pred.split_available);
        let again = mc_dropout_predict(&dropout_unit(p), &x, 50, &mut rng_from_seed(12)).unwrap();
        assert_eq!(again, mc_dropout_predict(&dropout_unit(p), &x, 50, &mut rng_from_seed(12)).unwrap());
    }

    #[test]
    fn mc_dropout_rate_zero_and_errors() {
        let x = Matrix::from_element(1, 1, 2.5);
        let pred = mc_dropout_predict(&dropout_unit(0.0), &x, 10, &mut rng_from_seed(0)).unwrap()[0];
        assert_eq!((pred.mean, pred.variance_total), (2.5, 0.0));
        assert!(matches!(mc_dropout_predict(&linear_net(), &x, 10, &mut rng_from_seed(0)), Err(Error::NoDropout)));
        assert!(mc_dropout_predict(&dropout_unit(0.1), &x, 1, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn mc_dropout_gaussian_head_splits() {
        let spec = NetworkSpec {
            input_dim: 1,
            layers: vec![
                LayerSpec::Dense { width: 8, activation: Activation::Tanh },
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::GaussianOutput,
            ],
        };
        let net = Network::new(spec, 1).unwrap();
        let preds = mc_dropout_predict(&net, &Matrix::from_element(2, 1, 0.4), 20, &mut rng_from_seed(1)).unwrap();
        for p in preds {
            assert!(p.split_available && p.variance_aleatory > 0.0);
            assert!((p.variance_total - p.variance_aleatory - p.variance_epistemic).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_predict_identities() {
        let net = linear_net();
        let x = Matrix::from_vec(3, 1, vec![-1.0, 0.0, 2.0]);
        let same = Matrix::from_row_slice(3, 2, &[0.5, 0.1, 0.5, 0.1, 0.5, 0.1]);
        let push = posterior_predict(&net, &same, &x, 0.3, PredictiveMode::Pushforward).unwrap();
        let pred = posterior_predict(&net, &same, &x, 0.3, PredictiveMode::Predictive).unwrap();
        for (a, b) in push.iter().zip(&pred) {
            assert!(a.variance_total < 1e-20);
            assert_relative_eq!(b.variance_total, 0.09, epsilon = 1e-15);
        }
        let mut rng = rng_from_seed(13);
        let prior = Matrix::from_fn(10_000, 2, |_, _| 2.0 * standard_normal(&mut rng));
        let push = posterior_predict(&net, &prior, &x, 0.3, PredictiveMode::Pushforward).unwrap();
        let pred = posterior_predict(&net, &prior, &x, 0.3, PredictiveMode::Predictive).unwrap();
        for (i, (a, b)) in push.iter().zip(&pred).enumerate() {
            let xi: f64 = x[(i, 0)];
            let analytic = 4.0 * (xi * xi + 1.0);
            assert!((a.variance_total - analytic).abs() < 0.05 * analytic);
            assert_relative_eq!(b.variance_total - a.variance_total, b.variance_aleatory, epsilon = 1e-12);
            assert_relative_eq!(b.variance_aleatory, 0.09, epsilon = 1e-15);
        }
        assert!(posterior_predict(&net, &same.rows(0, 1).into_owned(), &x, 0.3, PredictiveMode::Predictive).is_err());
    }

    #[test]
    fn samples_csv_header() {
        let f = tempfile::NamedTempFile::new().unwrap();
        write_samples_csv(&Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), f.path()).unwrap();
        assert_eq!(std::fs::read_to_string(f.path()).unwrap(), "theta0,theta1\n1,2\n3,4\n");
    }
}
