//! Batch front end behind the `uqkit` binary: experiment configs, model
//! bundles and one function per subcommand.
//!
//! Exit codes: 0 success, 2 schema or usage error, 3 data error, 4 numeric
//! failure (divergence, loss of positive definiteness). Failures print a
//! JSON object `{"error", "message", "exit_code"}` on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acquisition::{refine, write_trace_csv, AcquisitionSpec, Tau};
use crate::bnn::{
    mc_dropout_predict, mfvi_fit, mh_sample, posterior_predict, svgd_fit, write_samples_csv, MfviConfig, MfviPosterior,
    MhOptions, NetworkPosterior, Posterior, PredictiveMode, SvgdConfig,
};
use crate::data::{
    gen_toy_1d, gen_toy_2d_clusters, gen_toy_2d_ood, grid2d, load_csv, read_numeric_csv, toy_1d_true,
    toy_1d_walkthrough, toy_2d_true, Bounds, Dataset, Standardization, TOY_1D_NOISE_STD,
};
use crate::ensemble::{train_ensemble, EnsembleModel, DEFAULT_ENSEMBLE_SIZE};
use crate::evaluation::{
    default_levels, ece, isotonic_recalibrate, miscalibration_area, nll, regression_calibration, sparsification, u_pool,
    CalibrationCurve, CalibrationMode, ErrorMetric, IsotonicMap, SparsificationOptions, SparsificationReport, Weighting,
};
use crate::gpr::{FitOptions, GpModel, SavedGpModel};
use crate::kernels::KernelSpec;
use crate::nnet::{Loss, Network, NetworkSpec, OutputKind, ResNetOptions, SavedNetwork, TrainConfig};
use crate::numerics::{derive_seed, rng_from_seed, Matrix};
use crate::sngp::{DnnGpr, SngpConfig, SngpModel, DEFAULT_SPECTRAL_BOUND};
use crate::{Error, GaussianPrediction, Result};

/// Version of the bundle and config layout.
pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const DIAGNOSTICS: &str = "diagnostics.json";
const TOY_1D_RANGE: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gpr,
    Ensemble,
    McDropout,
    Mfvi,
    Mh,
    Svgd,
    Sngp,
    DnnGpr,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Gpr,
        Method::Ensemble,
        Method::McDropout,
        Method::Mfvi,
        Method::Mh,
        Method::Svgd,
        Method::Sngp,
        Method::DnnGpr,
    ];

    /// Config key of the method's hyperparameter section.
    pub fn key(self) -> &'static str {
        match self {
            Method::Gpr => "gpr",
            Method::Ensemble => "ensemble",
            Method::McDropout => "mc_dropout",
            Method::Mfvi => "mfvi",
            Method::Mh => "mh",
            Method::Svgd => "svgd",
            Method::Sngp => "sngp",
            Method::DnnGpr => "dnn_gpr",
        }
    }
}

fn default_target() -> String {
    "y".into()
}

fn default_toy_1d_range() -> (f64, f64) {
    TOY_1D_RANGE
}

fn default_toy_1d_noise() -> f64 {
    TOY_1D_NOISE_STD
}

/// Where the training data comes from. Relative CSV paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Toy1d {
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_toy_1d_range")]
        x_range: (f64, f64),
        #[serde(default = "default_toy_1d_noise")]
        noise_std: f64,
    },
    /// The 8-point training set of the 1D calibration walkthrough.
    Toy1dWalkthrough {
        #[serde(default)]
        seed: u64,
    },
    Toy2d {
        n_per_cluster: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        heteroscedastic: bool,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_target")]
        target: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprParams {
    pub kernel: KernelSpec,
    pub noise_std: f64,
    pub fit: FitOptions,
}

impl Default for GprParams {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::squared_exponential(1.0, 1.0),
            noise_std: 0.1,
            fit: FitOptions::default(),
        }
    }
}

fn yes() -> bool {
    true
}

fn small_resnet(output: OutputKind) -> ResNetOptions {
    ResNetOptions {
        width: 32,
        blocks: 2,
        output,
        ..ResNetOptions::default()
    }
}

fn nll_training() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        epochs: 1000,
        loss: Loss::Nll,
        ..TrainConfig::default()
    }
}

/// Networks are either given explicitly (`network`) or built from the
/// residual preset (`resnet`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleParams {
    pub members: usize,
    pub network: Option<NetworkSpec>,
    pub resnet: ResNetOptions,
    pub train: TrainConfig,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        Self {
            members: DEFAULT_ENSEMBLE_SIZE,
            network: None,
            resnet: small_resnet(OutputKind::Gaussian),
            train: nll_training(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McDropoutParams {
    /// Stochastic forward passes per prediction.
    pub passes: usize,
    pub network: Option<NetworkSpec>,
    pub resnet: ResNetOptions,
    pub train: TrainConfig,
}

impl Default for McDropoutParams {
    fn default() -> Self {
        Self {
            passes: 100,
            network: None,
            resnet: ResNetOptions {
                dropout_rate: Some(0.1),
                ..small_resnet(OutputKind::Gaussian)
            },
            train: nll_training(),
        }
    }
}

fn bayes_resnet() -> ResNetOptions {
    ResNetOptions {
        width: 16,
        blocks: 1,
        activation: crate::nnet::Activation::Tanh,
        output: OutputKind::Scalar,
        ..ResNetOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfviParams {
    pub network: Option<NetworkSpec>,
    pub resnet: ResNetOptions,
    pub prior_std: f64,
    pub noise_std: f64,
    pub mfvi: MfviConfig,
    /// Parameter draws per prediction.
    pub predictive_samples: usize,
}

impl Default for MfviParams {
    fn default() -> Self {
        Self {
            network: None,
            resnet: bayes_resnet(),
            prior_std: 1.0,
            noise_std: 0.1,
            mfvi: MfviConfig::default(),
            predictive_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhParams {
    pub network: Option<NetworkSpec>,
    pub resnet: ResNetOptions,
    pub prior_std: f64,
    pub noise_std: f64,
    /// Recorded steps after burn-in.
    pub steps: usize,
    pub burn_in: usize,
    pub mh: MhOptions,
    /// Chain states kept for prediction (evenly spaced).
    pub max_samples: usize,
}

impl Default for MhParams {
    fn default() -> Self {
        Self {
            network: None,
            resnet: bayes_resnet(),
            prior_std: 1.0,
            noise_std: 0.1,
            steps: 20_000,
            burn_in: 5_000,
            mh: MhOptions {
                proposal_std: 0.01,
                adapt_steps: 2_000,
                thin: 1,
            },
            max_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvgdParams {
    pub network: Option<NetworkSpec>,
    pub resnet: ResNetOptions,
    pub prior_std: f64,
    pub noise_std: f64,
    pub svgd: SvgdConfig,
}

impl Default for SvgdParams {
    fn default() -> Self {
        Self {
            network: None,
            resnet: bayes_resnet(),
            prior_std: 1.0,
            noise_std: 0.1,
            svgd: SvgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SngpParams {
    pub network: Option<NetworkSpec>,
    pub resnet: ResNetOptions,
    pub sngp: SngpConfig,
}

impl Default for SngpParams {
    fn default() -> Self {
        Self {
            network: None,
            resnet: ResNetOptions {
                spectral_bound: Some(DEFAULT_SPECTRAL_BOUND),
                ..small_resnet(OutputKind::Scalar)
            },
            sngp: SngpConfig {
                train: TrainConfig {
                    learning_rate: 5e-3,
                    loss: Loss::Mse,
                    ..TrainConfig::default()
                },
                ..SngpConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnnGprParams {
    pub network: Option<NetworkSpec>,
    pub resnet: ResNetOptions,
    /// Extractor pretraining with the network's own output layer.
    pub train: TrainConfig,
    pub kernel: KernelSpec,
    pub noise_std: f64,
    pub fit: FitOptions,
}

impl Default for DnnGprParams {
    fn default() -> Self {
        Self {
            network: None,
            resnet: small_resnet(OutputKind::Scalar),
            train: TrainConfig {
                learning_rate: 5e-3,
                epochs: 1000,
                loss: Loss::Mse,
                ..TrainConfig::default()
            },
            kernel: KernelSpec::squared_exponential(1.0, 1.0),
            noise_std: 0.1,
            fit: FitOptions::default(),
        }
    }
}

/// One training run. Only the section of the selected method may be given;
/// omitted sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub data: DataSource,
    #[serde(default)]
    pub seed: u64,
    /// Standardize features and target with training-set statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Bundle directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpr: Option<GprParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_dropout: Option<McDropoutParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfvi: Option<MfviParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mh: Option<MhParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svgd: Option<SvgdParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sngp: Option<SngpParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dnn_gpr: Option<DnnGprParams>,
}

impl ExperimentConfig {
    /// Config with default hyperparameters for `method`.
    pub fn new(method: Method, data: DataSource) -> Self {
        Self {
            method,
            data,
            seed: 0,
            standardize: true,
            output: None,
            gpr: None,
            ensemble: None,
            mc_dropout: None,
            mfvi: None,
            mh: None,
            svgd: None,
            sngp: None,
            dnn_gpr: None,
        }
        .materialized()
    }

    fn sections_present(&self) -> [(Method, bool); 8] {
        [
            (Method::Gpr, self.gpr.is_some()),
            (Method::Ensemble, self.ensemble.is_some()),
            (Method::McDropout, self.mc_dropout.is_some()),
            (Method::Mfvi, self.mfvi.is_some()),
            (Method::Mh, self.mh.is_some()),
            (Method::Svgd, self.svgd.is_some()),
            (Method::Sngp, self.sngp.is_some()),
            (Method::DnnGpr, self.dnn_gpr.is_some()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (method, present) in self.sections_present() {
            if present && method != self.method {
                return Err(Error::Schema(format!(
                    "section `{}` does not belong to method `{}`",
                    method.key(),
                    self.method.key()
                )));
            }
        }
        let c = self.materialized();
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Schema(format!("{what} must be positive")))
            }
        };
        match self.method {
            Method::Gpr => positive(c.gpr.as_ref().unwrap().noise_std.max(f64::MIN_POSITIVE), "gpr.noise_std")?,
            Method::Ensemble => {
                let p = c.ensemble.as_ref().unwrap();
                if p.members == 0 {
                    return Err(Error::Schema("ensemble.members must be at least 1".into()));
                }
                p.train.validate()?;
            }
            Method::McDropout => {
                let p = c.mc_dropout.as_ref().unwrap();
                if p.passes < 2 {
                    return Err(Error::Schema("mc_dropout.passes must be at least 2".into()));
                }
                p.train.validate()?;
            }
            Method::Mfvi => {
                let p = c.mfvi.as_ref().unwrap();
                positive(p.prior_std, "mfvi.prior_std")?;
                positive(p.noise_std, "mfvi.noise_std")?;
                if p.predictive_samples < 2 || p.mfvi.n_mc == 0 {
                    return Err(Error::Schema("mfvi needs n_mc ≥ 1 and predictive_samples ≥ 2".into()));
                }
            }
            Method::Mh => {
                let p = c.mh.as_ref().unwrap();
                positive(p.prior_std, "mh.prior_std")?;
                positive(p.noise_std, "mh.noise_std")?;
                if p.steps < 2 || p.max_samples < 2 {
                    return Err(Error::Schema("mh needs steps ≥ 2 and max_samples ≥ 2".into()));
                }
            }
            Method::Svgd => {
                let p = c.svgd.as_ref().unwrap();
                positive(p.prior_std, "svgd.prior_std")?;
                positive(p.noise_std, "svgd.noise_std")?;
                if p.svgd.n_particles < 2 {
                    return Err(Error::Schema("svgd.n_particles must be at least 2".into()));
                }
            }
            Method::Sngp => {
                let p = c.sngp.as_ref().unwrap();
                positive(p.sngp.noise_std, "sngp.noise_std")?;
                p.sngp.train.validate()?;
            }
            Method::DnnGpr => {
                let p = c.dnn_gpr.as_ref().unwrap();
                p.train.validate()?;
            }
        }
        Ok(())
    }

    /// Same config with the active method section filled with defaults.
    pub fn materialized(&self) -> Self {
        let mut c = self.clone();
        match c.method {
            Method::Gpr => c.gpr = Some(c.gpr.unwrap_or_default()),
            Method::Ensemble => c.ensemble = Some(c.ensemble.unwrap_or_default()),
            Method::McDropout => c.mc_dropout = Some(c.mc_dropout.unwrap_or_default()),
            Method::Mfvi => c.mfvi = Some(c.mfvi.unwrap_or_default()),
            Method::Mh => c.mh = Some(c.mh.unwrap_or_default()),
            Method::Svgd => c.svgd = Some(c.svgd.unwrap_or_default()),
            Method::Sngp => c.sngp = Some(c.sngp.unwrap_or_default()),
            Method::DnnGpr => c.dnn_gpr = Some(c.dnn_gpr.unwrap_or_default()),
        }
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Reads and validates a config; returns it with the directory used to
/// resolve relative data paths.
pub fn load_config(path: impl AsRef<Path>) -> Result<(ExperimentConfig, PathBuf)> {
    let path = path.as_ref();
    let config = ExperimentConfig::from_json(&fs::read_to_string(path)?)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

/// Loads the training data of a config.
pub fn load_training_data(source: &DataSource, base_dir: &Path) -> Result<Dataset> {
    let mut ds = match source {
        DataSource::Toy1d {
            n,
            seed,
            x_range,
            noise_std,
        } => gen_toy_1d(*n, *x_range, *noise_std, *seed)?,
        DataSource::Toy1dWalkthrough { seed } => toy_1d_walkthrough(*seed)?.0,
        DataSource::Toy2d {
            n_per_cluster,
            seed,
            heteroscedastic,
        } => gen_toy_2d_clusters(*n_per_cluster, *seed, *heteroscedastic)?,
        DataSource::Csv { path, target } => {
            let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
            load_csv(path, target)?
        }
    };
    let (features, target) = ds.column_names();
    ds.feature_names = Some(features);
    ds.target_name = Some(target);
    if ds.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub method: Method,
    pub input_dim: usize,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub n_train: usize,
    /// Training-set statistics applied to every input before prediction.
    pub standardization: Option<Standardization>,
    pub config: ExperimentConfig,
}

/// Training diagnostics stored next to the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_history: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_loss_histories: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elbo_history: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_marginal_likelihood: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Gpr(GpModel),
    Ensemble(EnsembleModel),
    McDropout { net: Network, passes: usize },
    Mfvi { net: Network, posterior: MfviPosterior, samples: usize, noise_std: f64 },
    /// Parameter samples from MH or SVGD, one per row.
    Samples { net: Network, samples: Matrix, noise_std: f64 },
    Sngp(SngpModel),
    DnnGpr(DnnGpr),
}

/// A trained model with everything needed to predict on raw inputs.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: Manifest,
    pub model: TrainedModel,
    pub diagnostics: Diagnostics,
}

fn build_spec(network: &Option<NetworkSpec>, resnet: &ResNetOptions, input_dim: usize) -> Result<NetworkSpec> {
    let spec = match network {
        Some(spec) => {
            if spec.input_dim != input_dim {
                return Err(Error::Schema(format!(
                    "network input_dim {} does not match the data ({input_dim} features)",
                    spec.input_dim
                )));
            }
            spec.clone()
        }
        None => NetworkSpec::resnet(input_dim, resnet),
    };
    spec.validate()?;
    Ok(spec)
}

fn evenly_spaced_rows(m: &Matrix, max_rows: usize) -> Matrix {
    if m.nrows() <= max_rows {
        return m.clone();
    }
    let stride = m.nrows().div_ceil(max_rows);
    let rows: Vec<usize> = (0..m.nrows()).step_by(stride).collect();
    m.select_rows(&rows)
}

/// Trains the model described by `config` on its data source.
pub fn train(config: &ExperimentConfig, base_dir: &Path) -> Result<Bundle> {
    config.validate()?;
    let config = config.materialized();
    let raw = load_training_data(&config.data, base_dir)?;
    let (ds, standardization) = if config.standardize {
        let record = Standardization::fit(&raw)?;
        (record.apply(&raw)?, Some(record))
    } else {
        (raw.clone(), None)
    };
    let (x, y) = (&ds.x, &ds.y);
    let d = ds.dim();
    let seed = config.seed;
    let mut diagnostics = Diagnostics::default();
    let model = match config.method {
        Method::Gpr => {
            let p = config.gpr.as_ref().unwrap();
            let gp = GpModel::fit(x.clone(), y.clone(), p.kernel.clone(), p.noise_std, &p.fit, &mut rng_from_seed(derive_seed(seed, 1)))?;
            diagnostics.log_marginal_likelihood = Some(gp.log_marginal_likelihood());
            TrainedModel::Gpr(gp)
        }
        Method::Ensemble => {
            let p = config.ensemble.as_ref().unwrap();
            let spec = build_spec(&p.network, &p.resnet, d)?;
            let ens = train_ensemble(&spec, x, y, p.members, &p.train, seed)?;
            diagnostics.member_loss_histories = Some(ens.reports().iter().map(|r| r.loss_history.clone()).collect());
            TrainedModel::Ensemble(ens)
        }
        Method::McDropout => {
            let p = config.mc_dropout.as_ref().unwrap();
            let spec = build_spec(&p.network, &p.resnet, d)?;
            if !spec.has_dropout() {
                return Err(Error::NoDropout);
            }
            let mut net = Network::new(spec, derive_seed(seed, 1))?;
            let report = net.train(x, y, &TrainConfig { seed: derive_seed(seed, 2), ..p.train.clone() })?;
            diagnostics.loss_history = Some(report.loss_history);
            TrainedModel::McDropout { net, passes: p.passes }
        }
        Method::Mfvi => {
            let p = config.mfvi.as_ref().unwrap();
            let net = Network::new(build_spec(&p.network, &p.resnet, d)?, derive_seed(seed, 1))?;
            let post = NetworkPosterior::new(net.clone(), x.clone(), y.clone(), p.prior_std, p.noise_std)?;
            let q = mfvi_fit(&post, net.params(), &p.mfvi, &mut rng_from_seed(derive_seed(seed, 2)))?;
            diagnostics.elbo_history = Some(q.elbo_history.clone());
            TrainedModel::Mfvi {
                net,
                posterior: q,
                samples: p.predictive_samples,
                noise_std: p.noise_std,
            }
        }
        Method::Mh => {
            let p = config.mh.as_ref().unwrap();
            let net = Network::new(build_spec(&p.network, &p.resnet, d)?, derive_seed(seed, 1))?;
            let post = NetworkPosterior::new(net.clone(), x.clone(), y.clone(), p.prior_std, p.noise_std)?;
            let chain = mh_sample(&Posterior(&post), net.params(), p.burn_in + p.steps, &p.mh, &mut rng_from_seed(derive_seed(seed, 2)))?;
            diagnostics.acceptance_rate = Some(chain.acceptance_rate);
            let kept_from = p.burn_in.div_ceil(p.mh.thin.max(1)).min(chain.samples.nrows() - 1);
            let tail = chain.samples.rows(kept_from, chain.samples.nrows() - kept_from).into_owned();
            TrainedModel::Samples {
                net,
                samples: evenly_spaced_rows(&tail, p.max_samples),
                noise_std: p.noise_std,
            }
        }
        Method::Svgd => {
            let p = config.svgd.as_ref().unwrap();
            let net = Network::new(build_spec(&p.network, &p.resnet, d)?, derive_seed(seed, 1))?;
            let post = NetworkPosterior::new(net.clone(), x.clone(), y.clone(), p.prior_std, p.noise_std)?;
            let particles = svgd_fit(&Posterior(&post), net.params(), &p.svgd, &mut rng_from_seed(derive_seed(seed, 2)))?;
            TrainedModel::Samples {
                net,
                samples: particles,
                noise_std: p.noise_std,
            }
        }
        Method::Sngp => {
            let p = config.sngp.as_ref().unwrap();
            let spec = build_spec(&p.network, &p.resnet, d)?;
            let model = SngpModel::fit(&spec, x, y, &p.sngp, seed)?;
            diagnostics.loss_history = Some(model.report().loss_history.clone());
            TrainedModel::Sngp(model)
        }
        Method::DnnGpr => {
            let p = config.dnn_gpr.as_ref().unwrap();
            let mut net = Network::new(build_spec(&p.network, &p.resnet, d)?, derive_seed(seed, 1))?;
            let report = net.train(x, y, &TrainConfig { seed: derive_seed(seed, 2), ..p.train.clone() })?;
            diagnostics.loss_history = Some(report.loss_history);
            let model = DnnGpr::fit(net, x, y, p.kernel.clone(), p.noise_std, &p.fit, &mut rng_from_seed(derive_seed(seed, 3)))?;
            diagnostics.log_marginal_likelihood = Some(model.gp().log_marginal_likelihood());
            TrainedModel::DnnGpr(model)
        }
    };
    let (feature_names, target_name) = raw.column_names();
    Ok(Bundle {
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            method: config.method,
            input_dim: d,
            feature_names,
            target_name,
            n_train: raw.len(),
            standardization,
            config,
        },
        model,
        diagnostics,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let (names, rows) = read_numeric_csv(path)?;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(rows.len(), names.len(), &flat))
}

impl Bundle {
    /// Writes the bundle directory: `manifest.json`, `diagnostics.json` and
    /// the method's model files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_json(&dir.join(MANIFEST), &self.manifest)?;
        write_json(&dir.join(DIAGNOSTICS), &self.diagnostics)?;
        match &self.model {
            TrainedModel::Gpr(gp) => write_json(&dir.join("model.json"), &gp.to_saved())?,
            TrainedModel::Ensemble(ens) => ens.save(dir.join("members"))?,
            TrainedModel::McDropout { net, .. } => write_json(&dir.join("network.json"), &net.to_saved())?,
            TrainedModel::Mfvi { net, posterior, .. } => {
                write_json(&dir.join("network.json"), &net.to_saved())?;
                write_json(&dir.join("mfvi.json"), posterior)?;
            }
            TrainedModel::Samples { net, samples, .. } => {
                write_json(&dir.join("network.json"), &net.to_saved())?;
                write_samples_csv(samples, dir.join("samples.csv"))?;
            }
            TrainedModel::Sngp(m) => m.save(dir.join("model.json"))?,
            TrainedModel::DnnGpr(m) => m.save(dir.join("model.json"))?,
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported bundle schema version {}", manifest.schema_version)));
        }
        let diagnostics = read_json(&dir.join(DIAGNOSTICS)).unwrap_or_default();
        let config = manifest.config.materialized();
        let network = || -> Result<Network> { Network::from_saved(read_json::<SavedNetwork>(&dir.join("network.json"))?) };
        let model = match manifest.method {
            Method::Gpr => TrainedModel::Gpr(GpModel::from_saved(read_json::<SavedGpModel>(&dir.join("model.json"))?)?),
            Method::Ensemble => TrainedModel::Ensemble(EnsembleModel::load(dir.join("members"))?),
            Method::McDropout => TrainedModel::McDropout {
                net: network()?,
                passes: config.mc_dropout.as_ref().unwrap().passes,
            },
            Method::Mfvi => {
                let p = config.mfvi.as_ref().unwrap();
                TrainedModel::Mfvi {
                    net: network()?,
                    posterior: read_json(&dir.join("mfvi.json"))?,
                    samples: p.predictive_samples,
                    noise_std: p.noise_std,
                }
            }
            Method::Mh | Method::Svgd => {
                let noise_std = match manifest.method {
                    Method::Mh => config.mh.as_ref().unwrap().noise_std,
                    _ => config.svgd.as_ref().unwrap().noise_std,
                };
                TrainedModel::Samples {
                    net: network()?,
                    samples: read_matrix_csv(&dir.join("samples.csv"))?,
                    noise_std,
                }
            }
            Method::Sngp => TrainedModel::Sngp(SngpModel::load(dir.join("model.json"))?),
            Method::DnnGpr => TrainedModel::DnnGpr(DnnGpr::load(dir.join("model.json"))?),
        };
        Ok(Self {
            manifest,
            model,
            diagnostics,
        })
    }

    /// Predictions on raw (unstandardized) inputs, in data units. Stochastic
    /// methods draw from a seed derived from the config seed, so repeated
    /// calls agree.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<GaussianPrediction>> {
        if x.ncols() != self.manifest.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.input_dim,
                actual: x.ncols(),
            });
        }
        let z = match &self.manifest.standardization {
            Some(s) => s.apply_x(x)?,
            None => x.clone(),
        };
        let mut rng = rng_from_seed(derive_seed(self.manifest.config.seed, 0x9ed1c7));
        let preds = match &self.model {
            TrainedModel::Gpr(gp) => gp.predict(&z, true)?,
            TrainedModel::Ensemble(ens) => ens.predict(&z)?,
            TrainedModel::McDropout { net, passes } => mc_dropout_predict(net, &z, *passes, &mut rng)?,
            TrainedModel::Mfvi {
                net,
                posterior,
                samples,
                noise_std,
            } => posterior_predict(net, &posterior.sample(*samples, &mut rng), &z, *noise_std, PredictiveMode::Predictive)?,
            TrainedModel::Samples { net, samples, noise_std } => {
                posterior_predict(net, samples, &z, *noise_std, PredictiveMode::Predictive)?
            }
            TrainedModel::Sngp(m) => m.predict(&z)?,
            TrainedModel::DnnGpr(m) => m.predict(&z, true)?,
        };
        Ok(match &self.manifest.standardization {
            Some(s) => preds.into_iter().map(|p| unstandardize(s, p)).collect(),
            None => preds,
        })
    }
}

fn unstandardize(s: &Standardization, p: GaussianPrediction) -> GaussianPrediction {
    GaussianPrediction {
        mean: s.invert_y(p.mean),
        variance_total: s.invert_variance(p.variance_total),
        variance_aleatory: s.invert_variance(p.variance_aleatory),
        variance_epistemic: s.invert_variance(p.variance_epistemic),
        split_available: p.split_available,
    }
}

/// Columns `mean,var_total,var_aleatory,var_epistemic,split_available`.
pub fn write_predictions_csv(preds: &[GaussianPrediction], path: impl AsRef<Path>) -> Result<()> {
    write_table(path.as_ref(), &[], None, preds)
}

fn write_table(path: &Path, coord_names: &[String], coords: Option<&Matrix>, preds: &[GaussianPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::data::csv_io)?;
    let mut header: Vec<String> = coord_names.to_vec();
    header.extend(["mean", "var_total", "var_aleatory", "var_epistemic", "split_available"].map(String::from));
    w.write_record(&header).map_err(crate::data::csv_io)?;
    for (i, p) in preds.iter().enumerate() {
        let mut rec: Vec<String> = coords.map(|c| c.row(i).iter().map(|v| v.to_string()).collect()).unwrap_or_default();
        rec.extend([
            p.mean.to_string(),
            p.variance_total.to_string(),
            p.variance_aleatory.to_string(),
            p.variance_epistemic.to_string(),
            p.split_available.to_string(),
        ]);
        w.write_record(&rec).map_err(crate::data::csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<GaussianPrediction>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers: Vec<String> = reader.headers().map_err(crate::data::csv_io)?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.into()));
    let (m, vt, va, ve, sa) = (col("mean")?, col("var_total")?, col("var_aleatory")?, col("var_epistemic")?, col("split_available")?);
    let mut preds = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            row: r + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let num = |j: usize| -> Result<f64> {
            record[j].trim().parse().map_err(|_| Error::Csv {
                row: r + 1,
                column: headers[j].clone(),
                message: format!("not a number: {:?}", &record[j]),
            })
        };
        let split = match record[sa].trim() {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(Error::Csv {
                    row: r + 1,
                    column: headers[sa].clone(),
                    message: format!("not a boolean: {other:?}"),
                })
            }
        };
        preds.push(GaussianPrediction {
            mean: num(m)?,
            variance_total: num(vt)?,
            variance_aleatory: num(va)?,
            variance_epistemic: num(ve)?,
            split_available: split,
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(preds)
}

/// Named columns of a numeric CSV, in the given order.
pub fn read_columns(path: impl AsRef<Path>, names: &[String]) -> Result<Matrix> {
    let (header, rows) = read_numeric_csv(path)?;
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).ok_or_else(|| Error::MissingColumn(n.clone())))
        .collect::<Result<_>>()?;
    Ok(Matrix::from_fn(rows.len(), idx.len(), |i, j| rows[i][idx[j]]))
}

fn read_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    Ok(read_columns(path, &[name.to_string()])?.column(0).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    #[value(name = "1d")]
    OneD,
    #[value(name = "2d")]
    TwoD,
}

/// Writes a toy training set. For `1d`, `n` points on `[-5, 5]`; for `2d`,
/// `n` points split evenly over the two training clusters.
pub fn gen_toy(kind: ToyKind, n: usize, seed: u64, heteroscedastic: bool, out: &Path, extra: Option<&Path>) -> Result<()> {
    match kind {
        ToyKind::OneD => {
            gen_toy_1d(n, TOY_1D_RANGE, TOY_1D_NOISE_STD, seed)?.write_csv(out)?;
            if let Some(path) = extra {
                gen_toy_1d(100, TOY_1D_RANGE, TOY_1D_NOISE_STD, derive_seed(seed, 1))?.write_csv(path)?;
            }
        }
        ToyKind::TwoD => {
            if n < 2 {
                return Err(Error::InvalidArgument("2d toy data needs n ≥ 2".into()));
            }
            gen_toy_2d_clusters(n / 2, seed, heteroscedastic)?.write_csv(out)?;
            if let Some(path) = extra {
                gen_toy_2d_ood(200, derive_seed(seed, 1), heteroscedastic)?.write_csv(path)?;
            }
        }
    }
    Ok(())
}

/// Predicts every row of a CSV holding the bundle's feature columns.
pub fn predict_csv(bundle: &Bundle, data: &Path, out: &Path) -> Result<Vec<GaussianPrediction>> {
    let x = read_columns(data, &bundle.manifest.feature_names)?;
    let preds = bundle.predict(&x)?;
    write_predictions_csv(&preds, out)?;
    Ok(preds)
}

/// Evaluation points for uncertainty maps: a `resolution²` grid for 2D
/// inputs, `resolution` points along `bounds.x1` for 1D inputs.
pub fn map_grid(input_dim: usize, bounds: Bounds, resolution: usize) -> Result<Matrix> {
    match input_dim {
        2 => grid2d(bounds, resolution),
        1 => {
            let full = grid2d(bounds, resolution)?;
            Ok(full.rows(0, resolution).columns(0, 1).into_owned())
        }
        d => Err(Error::InvalidArgument(format!("uncertainty maps need 1 or 2 input features, model has {d}"))),
    }
}

/// Predictions over a grid, written with the grid coordinates first.
pub fn map2d(bundle: &Bundle, bounds: Bounds, resolution: usize, out: &Path) -> Result<(Matrix, Vec<GaussianPrediction>)> {
    if bundle.manifest.input_dim != 2 {
        return Err(Error::InvalidArgument(format!(
            "map2d needs a model with 2 input features, this one has {}",
            bundle.manifest.input_dim
        )));
    }
    let grid = map_grid(2, bounds, resolution)?;
    let preds = bundle.predict(&grid)?;
    write_table(out, &bundle.manifest.feature_names, Some(&grid), &preds)?;
    Ok((grid, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub levels: usize,
    pub mode: CalibrationMode,
    pub weighting: Weighting,
    pub sparsification: SparsificationOptions,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            levels: 11,
            mode: CalibrationMode::TwoSided,
            weighting: Weighting::Uniform,
            sparsification: SparsificationOptions::default(),
        }
    }
}

/// Every metric of the evaluation suite for one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Mean Gaussian NLL including the `½ ln 2π` constant.
    pub nll: f64,
    pub calibration: CalibrationCurve,
    pub max_calibration_error: f64,
    pub weighting: Weighting,
    pub ece: f64,
    pub miscalibration_area: f64,
    pub u_pool_area: f64,
    /// `None` below the minimum sample count of the sparsification curve.
    pub sparsification: Option<SparsificationReport>,
    pub split_available: bool,
    pub mean_var_total: f64,
    pub mean_var_aleatory: f64,
    pub mean_var_epistemic: f64,
}

pub fn evaluate(preds: &[GaussianPrediction], targets: &[f64], opts: &EvaluateOptions) -> Result<EvaluationReport> {
    let levels = default_levels(opts.levels);
    let curve = regression_calibration(preds, targets, &levels, opts.mode)?;
    let (_, u_area) = u_pool(preds, targets)?;
    let errors: Vec<f64> = preds.iter().zip(targets).map(|(p, y)| (y - p.mean).abs()).collect();
    let n = preds.len() as f64;
    let std: Vec<f64> = preds.iter().map(GaussianPrediction::std).collect();
    let sparse = match sparsification(&std, &errors, &opts.sparsification) {
        Ok(r) => Some(r),
        Err(Error::TooFewSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    let mean_of = |f: fn(&GaussianPrediction) -> f64| preds.iter().map(f).sum::<f64>() / n;
    Ok(EvaluationReport {
        n: preds.len(),
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mae: errors.iter().sum::<f64>() / n,
        nll: nll(preds, targets, true)?,
        max_calibration_error: curve.max_abs_error(),
        weighting: opts.weighting,
        ece: ece(&curve, opts.weighting),
        miscalibration_area: miscalibration_area(&curve),
        u_pool_area: u_area,
        sparsification: sparse,
        split_available: preds.iter().all(|p| p.split_available),
        mean_var_total: mean_of(|p| p.variance_total),
        mean_var_aleatory: mean_of(|p| p.variance_aleatory),
        mean_var_epistemic: mean_of(|p| p.variance_epistemic),
        calibration: curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationReport {
    pub map: IsotonicMap,
    pub ece_before: f64,
    pub ece_after: f64,
}

/// Fits an isotonic recalibration map on validation predictions.
pub fn recalibrate(preds: &[GaussianPrediction], targets: &[f64], levels: usize, mode: CalibrationMode) -> Result<RecalibrationReport> {
    let map = isotonic_recalibrate(preds, targets)?;
    let levels = default_levels(levels);
    let before = regression_calibration(preds, targets, &levels, mode)?;
    let after = map.calibration(preds, targets, &levels, mode)?;
    Ok(RecalibrationReport {
        ece_before: ece(&before, Weighting::Uniform),
        ece_after: ece(&after, Weighting::Uniform),
        map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AcquisitionKind {
    Eff,
    U,
    Ei,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BuiltinOracle {
    /// `sin(0.9x)`.
    #[value(name = "toy-1d")]
    Toy1d,
    #[value(name = "toy-2d")]
    Toy2d,
}

/// Refinement of a GPR bundle over a candidate pool. The oracle is either a
/// built-in toy function or, when `oracle` is `None`, the target column of
/// the candidate CSV. Trace coordinates, oracle values and acquisition
/// values are reported in data units.
pub fn refine_bundle(
    bundle: &Bundle,
    spec: &AcquisitionSpec,
    candidates_csv: &Path,
    budget: usize,
    oracle: Option<BuiltinOracle>,
) -> Result<(Bundle, Vec<crate::acquisition::TraceRow>)> {
    let TrainedModel::Gpr(gp) = &bundle.model else {
        return Err(Error::Schema("refine needs a gpr bundle".into()));
    };
    let m = &bundle.manifest;
    let raw = read_columns(candidates_csv, &m.feature_names)?;
    let lookup = match oracle {
        Some(_) => None,
        None => Some(read_column(candidates_csv, &m.target_name)?),
    };
    let s = m.standardization.clone();
    let z = match &s {
        Some(s) => s.apply_x(&raw)?,
        None => raw.clone(),
    };
    let y_std = s.as_ref().map_or(1.0, |s| s.y_std);
    let to_model_y = |v: f64| s.as_ref().map_or(v, |s| s.apply_y(v));
    let model_spec = match *spec {
        AcquisitionSpec::Eff { threshold, tau } => AcquisitionSpec::Eff {
            threshold: to_model_y(threshold),
            tau: match tau {
                Tau::Fixed(t) => Tau::Fixed(t / y_std),
                other => other,
            },
        },
        AcquisitionSpec::U { threshold } => AcquisitionSpec::U {
            threshold: to_model_y(threshold),
        },
        AcquisitionSpec::Ei => AcquisitionSpec::Ei,
    };
    let call_oracle = |x: &[f64]| -> std::result::Result<f64, String> {
        let row = (0..z.nrows())
            .find(|&i| z.row(i).iter().zip(x).all(|(a, b)| a == b))
            .ok_or_else(|| "selected point is not a candidate".to_string())?;
        let raw_x: Vec<f64> = raw.row(row).iter().copied().collect();
        let value = match (oracle, &lookup) {
            (Some(BuiltinOracle::Toy1d), _) => match raw_x.as_slice() {
                [v] => toy_1d_true(*v),
                _ => return Err("toy-1d oracle needs one input feature".into()),
            },
            (Some(BuiltinOracle::Toy2d), _) => match raw_x.as_slice() {
                [a, b] => toy_2d_true(*a, *b),
                _ => return Err("toy-2d oracle needs two input features".into()),
            },
            (None, Some(values)) => values[row],
            (None, None) => unreachable!(),
        };
        Ok(to_model_y(value))
    };
    let refit = match &m.config.materialized().gpr {
        Some(p) => p.fit.clone(),
        None => FitOptions::default(),
    };
    let mut rng = rng_from_seed(derive_seed(m.config.seed, 0x4ef1));
    let result = refine(gp, call_oracle, &model_spec, &z, budget, &refit, &mut rng)?;
    let acquisition_scale = match spec {
        AcquisitionSpec::U { .. } => 1.0,
        _ => y_std,
    };
    let trace = result
        .trace
        .iter()
        .map(|row| {
            let x = match &s {
                Some(s) => s.invert_x(&Matrix::from_row_slice(1, row.x.len(), &row.x))?.row(0).iter().copied().collect(),
                None => row.x.clone(),
            };
            Ok(crate::acquisition::TraceRow {
                iteration: row.iteration,
                x,
                acquisition: row.acquisition * acquisition_scale,
                oracle: s.as_ref().map_or(row.oracle, |s| s.invert_y(row.oracle)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = m.clone();
    manifest.n_train += budget;
    let refined = Bundle {
        manifest,
        diagnostics: Diagnostics {
            log_marginal_likelihood: Some(result.model.log_marginal_likelihood()),
            ..Diagnostics::default()
        },
        model: TrainedModel::Gpr(result.model),
    };
    Ok((refined, trace))
}

/// One `--vary key=v1,v2,…` axis. Values parse as JSON, falling back to
/// plain strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Vary {
    pub key: String,
    pub values: Vec<Value>,
}

impl std::str::FromStr for Vary {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (key, values) = s.split_once('=').ok_or_else(|| format!("expected key=v1,v2,…, got {s:?}"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err("empty sweep key".into());
        }
        let values: Vec<Value> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if values.is_empty() {
            return Err(format!("no values given for {key}"));
        }
        Ok(Self { key: key.to_string(), values })
    }
}

fn find_key_paths(v: &Value, key: &str, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            if k == key {
                out.push(prefix.clone());
            }
            find_key_paths(child, key, prefix, out);
            prefix.pop();
        }
    }
}

/// Resolves a sweep key against a materialized config: dotted keys are
/// paths from the root; a bare key matches a top-level field, else a unique
/// field anywhere inside the active method's section.
pub fn resolve_key(config: &Value, method: Method, key: &str) -> Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(String::from).collect());
    }
    if config.get(key).is_some() {
        return Ok(vec![key.to_string()]);
    }
    let section = config.get(method.key()).cloned().unwrap_or(Value::Null);
    let mut found = Vec::new();
    find_key_paths(&section, key, &mut vec![method.key().to_string()], &mut found);
    match found.len() {
        1 => Ok(found.pop().unwrap()),
        0 => Err(Error::Schema(format!("sweep key `{key}` not found in the `{}` section", method.key()))),
        _ => Err(Error::Schema(format!(
            "sweep key `{key}` is ambiguous: {}",
            found.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, part) in path.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Schema(format!("`{}` is not an object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            map.insert(part.clone(), value);
            return Ok(());
        }
        node = map.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub index: usize,
    pub seed: u64,
    pub assignments: Vec<(String, Value)>,
    pub mean_std: f64,
    pub mean_var_epistemic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPair {
    pub run_a: usize,
    pub run_b: usize,
    /// `|mean std(a) − mean std(b)|` over the grid.
    pub mean_std_difference: f64,
    /// Grid average of `|std_a(x) − std_b(x)|`.
    pub mean_abs_pointwise_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub pairwise: Vec<SweepPair>,
}

/// Trains the Cartesian product of the `varies` axes over `base` (run `k`
/// uses seed `derive_seed(base.seed, k)`), writes each bundle and its
/// uncertainty map under `out/run_NNN/`, and reports pairwise differences of
/// the predictive std maps.
pub fn sweep(base: &ExperimentConfig, base_dir: &Path, varies: &[Vary], bounds: Bounds, resolution: usize, out: &Path) -> Result<SweepSummary> {
    base.validate()?;
    let root = serde_json::to_value(base.materialized())?;
    let paths: Vec<Vec<String>> = varies.iter().map(|v| resolve_key(&root, base.method, &v.key)).collect::<Result<_>>()?;
    let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
    for v in varies {
        combos = combos
            .into_iter()
            .flat_map(|c| (0..v.values.len()).map(move |i| [c.clone(), vec![i]].concat()))
            .collect();
    }
    let configs: Vec<(ExperimentConfig, Vec<(String, Value)>)> = combos
        .iter()
        .enumerate()
        .map(|(k, combo)| {
            let mut value = root.clone();
            let mut assignments = Vec::new();
            for ((v, path), &i) in varies.iter().zip(&paths).zip(combo) {
                set_path(&mut value, path, v.values[i].clone())?;
                assignments.push((path.join("."), v.values[i].clone()));
            }
            set_path(&mut value, &["seed".to_string()], Value::from(derive_seed(base.seed, k as u64)))?;
            let config: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
            config.validate()?;
            Ok((config, assignments))
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let maps: Vec<(SweepRun, Vec<f64>)> = configs
        .par_iter()
        .enumerate()
        .map(|(k, (config, assignments))| {
            let bundle = train(config, base_dir)?;
            let run_dir = out.join(format!("run_{k:03}"));
            bundle.save(run_dir.join("bundle"))?;
            let grid = map_grid(bundle.manifest.input_dim, bounds, resolution)?;
            let preds = bundle.predict(&grid)?;
            write_table(&run_dir.join("map.csv"), &bundle.manifest.feature_names, Some(&grid), &preds)?;
            let std: Vec<f64> = preds.iter().map(GaussianPrediction::std).collect();
            let n = std.len() as f64;
            Ok((
                SweepRun {
                    index: k,
                    seed: config.seed,
                    assignments: assignments.clone(),
                    mean_std: std.iter().sum::<f64>() / n,
                    mean_var_epistemic: preds.iter().map(|p| p.variance_epistemic).sum::<f64>() / n,
                },
                std,
            ))
        })
        .collect::<Result<_>>()?;
    let mut pairwise = Vec::new();
    for a in 0..maps.len() {
        for b in a + 1..maps.len() {
            let (ra, sa) = &maps[a];
            let (rb, sb) = &maps[b];
            pairwise.push(SweepPair {
                run_a: a,
                run_b: b,
                mean_std_difference: (ra.mean_std - rb.mean_std).abs(),
                mean_abs_pointwise_difference: sa.iter().zip(sb).map(|(p, q)| (p - q).abs()).sum::<f64>() / sa.len() as f64,
            });
        }
    }
    let summary = SweepSummary {
        runs: maps.into_iter().map(|(r, _)| r).collect(),
        pairwise,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let mut w = csv::Writer::from_path(out.join("pairwise.csv")).map_err(crate::data::csv_io)?;
    w.write_record(["run_a", "run_b", "mean_std_difference", "mean_abs_pointwise_difference"])
        .map_err(crate::data::csv_io)?;
    for p in &summary.pairwise {
        w.write_record([
            p.run_a.to_string(),
            p.run_b.to_string(),
            p.mean_std_difference.to_string(),
            p.mean_abs_pointwise_difference.to_string(),
        ])
        .map_err(crate::data::csv_io)?;
    }
    w.flush()?;
    Ok(summary)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Member { source, .. } => exit_code(source),
        Error::Divergence { .. } | Error::NotPositiveDefinite { .. } | Error::Singular { .. } => 4,
        Error::Schema(_)
        | Error::Json(_)
        | Error::InvalidArgument(_)
        | Error::InvalidHyperparameter(_)
        | Error::UnsupportedOrder(_)
        | Error::NoDropout => 2,
        _ => 3,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Member { source, .. } => error_kind(source),
        _ => match exit_code(e) {
            2 => "schema",
            4 => "numeric",
            _ => "data",
        },
    }
}

/// Machine-readable error line written to stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": error_kind(e),
        "message": e.to_string(),
        "exit_code": exit_code(e),
    })
    .to_string()
}

fn parse_bounds(s: &str) -> std::result::Result<Bounds, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("not a number: {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [a, b, c, d] => Ok(Bounds { x1: (*a, *b), x2: (*c, *d) }),
        _ => Err("expected x1_min,x1_max,x2_min,x2_max".into()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "uqkit", version, about = "Uncertainty quantification for regression models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy dataset as CSV.
    GenToy(GenToyArgs),
    /// Train a model from a JSON experiment config.
    Train(TrainArgs),
    /// Predict every row of a CSV.
    Predict(PredictArgs),
    /// Predict over a 2D grid.
    Map2d(Map2dArgs),
    /// Score predictions against targets.
    Evaluate(EvaluateArgs),
    /// Fit an isotonic recalibration map on validation predictions.
    Recalibrate(RecalibrateArgs),
    /// Actively refine a GPR model over a candidate pool.
    Refine(RefineArgs),
    /// Train a grid of config variations and compare their uncertainty maps.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(value_enum)]
    pub kind: ToyKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Heteroscedastic noise (2d only).
    #[arg(long)]
    pub heteroscedastic: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// 1d: 100 test points; 2d: the 200-point out-of-distribution cluster.
    #[arg(long)]
    pub extra_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Map2dArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `x1_min,x1_max,x2_min,x2_max`.
    #[arg(long, value_parser = parse_bounds, default_value = "-15,15,-15,15", allow_hyphen_values = true)]
    pub bounds: Bounds,
    #[arg(long, default_value_t = crate::data::DEFAULT_GRID_RESOLUTION)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    TwoSided,
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Uniform,
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Rmse,
    Mae,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub preds: PathBuf,
    /// CSV holding the target column, row-aligned with the predictions.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value = "y")]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of confidence levels, equally spaced over [0, 1].
    #[arg(long, default_value_t = 11)]
    pub levels: usize,
    #[arg(long, value_enum, default_value = "two-sided")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "uniform")]
    pub weighting: WeightingArg,
    #[arg(long, value_enum, default_value = "rmse")]
    pub metric: MetricArg,
    /// Also write `calibration.csv` and `sparsification.csv` here.
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecalibrateArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value = "y")]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub levels: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub acquisition: AcquisitionKind,
    /// Limit-state value for `eff` and `u`.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Fixed EFF half-width; defaults to two predictive standard deviations.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub budget: usize,
    /// Built-in oracle; without it the candidate CSV's target column is used.
    #[arg(long, value_enum)]
    pub oracle: Option<BuiltinOracle>,
    #[arg(long)]
    pub out: PathBuf,
    /// Save the refined bundle here.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=v1,v2,…`; repeat for a grid.
    #[arg(long, required = true)]
    pub vary: Vec<Vary>,
    #[arg(long, value_parser = parse_bounds, default_value = "-15,15,-15,15", allow_hyphen_values = true)]
    pub bounds: Bounds,
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn acquisition_spec(args: &RefineArgs) -> Result<AcquisitionSpec> {
    let threshold = || args.threshold.ok_or_else(|| Error::Schema("--threshold is required for eff and u".into()));
    Ok(match args.acquisition {
        AcquisitionKind::Eff => AcquisitionSpec::Eff {
            threshold: threshold()?,
            tau: args.tau.map_or_else(Tau::default, Tau::Fixed),
        },
        AcquisitionKind::U => AcquisitionSpec::U { threshold: threshold()? },
        AcquisitionKind::Ei => AcquisitionSpec::Ei,
    })
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy(a) => gen_toy(a.kind, a.n, a.seed, a.heteroscedastic, &a.out, a.extra_out.as_deref()),
        Command::Train(a) => {
            let (config, base) = load_config(&a.config)?;
            let out = a
                .out
                .or_else(|| config.output.clone().map(|p| if p.is_absolute() { p } else { base.join(p) }))
                .ok_or_else(|| Error::Schema("no output directory: pass --out or set `output`".into()))?;
            train(&config, &base)?.save(out)
        }
        Command::Predict(a) => predict_csv(&Bundle::load(&a.model)?, &a.data, &a.out).map(|_| ()),
        Command::Map2d(a) => map2d(&Bundle::load(&a.model)?, a.bounds, a.resolution, &a.out).map(|_| ()),
        Command::Evaluate(a) => {
            let preds = read_predictions_csv(&a.preds)?;
            let targets = read_column(&a.targets, &a.target)?;
            let opts = EvaluateOptions {
                levels: a.levels,
                mode: match a.mode {
                    ModeArg::TwoSided => CalibrationMode::TwoSided,
                    ModeArg::OneSided => CalibrationMode::OneSided,
                },
                weighting: match a.weighting {
                    WeightingArg::Uniform => Weighting::Uniform,
                    WeightingArg::Count => Weighting::Count,
                },
                sparsification: SparsificationOptions {
                    metric: match a.metric {
                        MetricArg::Rmse => ErrorMetric::Rmse,
                        MetricArg::Mae => ErrorMetric::Mae,
                    },
                    ..SparsificationOptions::default()
                },
            };
            let report = evaluate(&preds, &targets, &opts)?;
            write_json(&a.out, &report)?;
            if let Some(dir) = a.curves_dir {
                fs::create_dir_all(&dir)?;
                report.calibration.write_csv(dir.join("calibration.csv"), opts.weighting)?;
                if let Some(s) = &report.sparsification {
                    s.write_csv(dir.join("sparsification.csv"))?;
                }
            }
            Ok(())
        }
        Command::Recalibrate(a) => {
            let preds = read_predictions_csv(&a.preds)?;
            let targets = read_column(&a.targets, &a.target)?;
            write_json(&a.out, &recalibrate(&preds, &targets, a.levels, CalibrationMode::TwoSided)?)
        }
        Command::Refine(a) => {
            let spec = acquisition_spec(&a)?;
            let bundle = Bundle::load(&a.model)?;
            let (refined, trace) = refine_bundle(&bundle, &spec, &a.candidates, a.budget, a.oracle)?;
            write_trace_csv(&trace, bundle.manifest.input_dim, &a.out)?;
            if let Some(dir) = a.model_out {
                refined.save(dir)?;
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let (config, base) = load_config(&a.config)?;
            sweep(&config, &base, &a.vary, a.bounds, a.resolution, &a.out).map(|_| ())
        }
    }
}
