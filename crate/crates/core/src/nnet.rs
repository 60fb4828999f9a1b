//! Small feedforward networks with hand-written reverse-mode gradients.
//!
//! All trainable values live in one flat parameter vector so that Bayesian
//! routines can treat a network as a function `f(x; θ)`. Each layer owns a
//! weight block stored row-major (`out × in`) followed by its bias block; the
//! [`LayoutEntry`] table records the offsets.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics::{derive_seed, power_iteration_from, rng_from_seed, Matrix, Rng, Vector};
use crate::{Error, Result};

/// Floor added to the softplus variance head.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Self::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        width: usize,
        activation: Activation,
    },
    /// `x + act(W x + b)`; the input width must equal `width`. With a
    /// `spectral_bound` the inner weight is spectrally normalized.
    Residual {
        width: usize,
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spectral_bound: Option<f64>,
    },
    Dropout {
        rate: f64,
    },
    SpectralDense {
        width: usize,
        activation: Activation,
        bound: f64,
    },
    /// Two linear heads: mean and a softplus-transformed variance.
    GaussianOutput,
    ScalarOutput,
}

impl LayerSpec {
    fn is_output(&self) -> bool {
        matches!(self, Self::GaussianOutput | Self::ScalarOutput)
    }

    fn spectral_bound(&self) -> Option<f64> {
        match self {
            Self::SpectralDense { bound, .. } => Some(*bound),
            Self::Residual { spectral_bound, .. } => *spectral_bound,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Gaussian,
    Scalar,
}

/// Layer stack of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

/// Options for [`NetworkSpec::resnet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResNetOptions {
    pub width: usize,
    pub blocks: usize,
    pub activation: Activation,
    /// Dropout after every residual block.
    pub dropout_rate: Option<f64>,
    /// Spectral normalization bound for every hidden layer.
    pub spectral_bound: Option<f64>,
    pub output: OutputKind,
}

impl Default for ResNetOptions {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            activation: Activation::Relu,
            dropout_rate: None,
            spectral_bound: None,
            output: OutputKind::Gaussian,
        }
    }
}

impl NetworkSpec {
    /// Input projection followed by residual blocks and an output head.
    pub fn resnet(input_dim: usize, opts: &ResNetOptions) -> Self {
        let mut layers = Vec::new();
        layers.push(match opts.spectral_bound {
            Some(bound) => LayerSpec::SpectralDense {
                width: opts.width,
                activation: opts.activation,
                bound,
            },
            None => LayerSpec::Dense {
                width: opts.width,
                activation: opts.activation,
            },
        });
        for _ in 0..opts.blocks {
            layers.push(LayerSpec::Residual {
                width: opts.width,
                activation: opts.activation,
                spectral_bound: opts.spectral_bound,
            });
            if let Some(rate) = opts.dropout_rate {
                layers.push(LayerSpec::Dropout { rate });
            }
        }
        layers.push(match opts.output {
            OutputKind::Gaussian => LayerSpec::GaussianOutput,
            OutputKind::Scalar => LayerSpec::ScalarOutput,
        });
        Self { input_dim, layers }
    }

    /// 100-50-50-50-50-10 fully connected stack with a Gaussian head. The
    /// activation is not given with that architecture; relu is assumed.
    pub fn dense_stack_preset(input_dim: usize) -> Self {
        let mut layers: Vec<LayerSpec> = [100, 50, 50, 50, 50, 10]
            .into_iter()
            .map(|width| LayerSpec::Dense {
                width,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec::GaussianOutput);
        Self { input_dim, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Schema("input_dim must be positive".into()));
        }
        let n_out = self.layers.iter().filter(|l| l.is_output()).count();
        if n_out != 1 || !self.layers.last().is_some_and(LayerSpec::is_output) {
            return Err(Error::Schema(
                "network needs exactly one output layer, placed last".into(),
            ));
        }
        let mut dim = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { width, .. } => {
                    check_width(i, *width)?;
                    dim = *width;
                }
                LayerSpec::SpectralDense { width, bound, .. } => {
                    check_width(i, *width)?;
                    check_bound(i, *bound)?;
                    dim = *width;
                }
                LayerSpec::Residual {
                    width,
                    spectral_bound,
                    ..
                } => {
                    check_width(i, *width)?;
                    if *width != dim {
                        return Err(Error::Schema(format!(
                            "layer {i}: residual width {width} differs from input width {dim}"
                        )));
                    }
                    if let Some(b) = spectral_bound {
                        check_bound(i, *b)?;
                    }
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::Schema(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                }
                LayerSpec::GaussianOutput | LayerSpec::ScalarOutput => {}
            }
        }
        Ok(())
    }

    pub fn output_kind(&self) -> OutputKind {
        match self.layers.last() {
            Some(LayerSpec::GaussianOutput) => OutputKind::Gaussian,
            _ => OutputKind::Scalar,
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }

    /// Width of the representation entering the output layer.
    pub fn feature_dim(&self) -> usize {
        let mut dim = self.input_dim;
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { width, .. }
                | LayerSpec::SpectralDense { width, .. }
                | LayerSpec::Residual { width, .. } => dim = *width,
                _ => {}
            }
        }
        dim
    }

    fn layout(&self) -> Vec<Option<LayoutEntry>> {
        let mut offset = 0;
        let mut dim = self.input_dim;
        self.layers
            .iter()
            .enumerate()
            .map(|(layer, spec)| {
                let rows = match spec {
                    LayerSpec::Dense { width, .. }
                    | LayerSpec::SpectralDense { width, .. }
                    | LayerSpec::Residual { width, .. } => *width,
                    LayerSpec::GaussianOutput => 2,
                    LayerSpec::ScalarOutput => 1,
                    LayerSpec::Dropout { .. } => return None,
                };
                let entry = LayoutEntry {
                    layer,
                    weight_offset: offset,
                    rows,
                    cols: dim,
                    bias_offset: offset + rows * dim,
                };
                offset += rows * dim + rows;
                dim = rows;
                Some(entry)
            })
            .collect()
    }
}

fn check_width(i: usize, width: usize) -> Result<()> {
    if width == 0 {
        return Err(Error::Schema(format!("layer {i}: width must be positive")));
    }
    Ok(())
}

fn check_bound(i: usize, bound: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::Schema(format!(
            "layer {i}: spectral bound must be positive"
        )));
    }
    Ok(())
}

/// Location of one layer's parameters in the flat vector. The weight block
/// is `rows × cols` row-major, the bias block has `rows` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer: usize,
    pub weight_offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub bias_offset: usize,
}

impl LayoutEntry {
    fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active with inverted scaling; masks drawn from the caller's RNG.
    Train,
    /// Deterministic; dropout is the identity.
    Eval,
    /// Dropout active (same scaling as training) for MC-dropout passes.
    EvalWithDropout,
}

/// Network output for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Output {
    pub mean: f64,
    /// Predicted variance for Gaussian-output networks.
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Nll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            loss: Loss::Nll,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Schema("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Schema("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Loss recorded before training (index 0) and after every epoch, evaluated
/// on the full training set in eval mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
}

/// Per-layer values kept from the forward pass for backpropagation.
enum Cache {
    Affine { input: Vec<f64>, pre: Vec<f64> },
    Dropout { mask: Option<Vec<f64>> },
    Output { input: Vec<f64>, pre: Vec<f64> },
}

struct Tape {
    caches: Vec<Cache>,
    output: Vec<f64>,
}

/// A network: spec, flat parameters and the layout table.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
    layout: Vec<Option<LayoutEntry>>,
    spectral_vectors: Vec<Option<Vector>>,
}

fn matvec(params: &[f64], e: &LayoutEntry, x: &[f64]) -> Vec<f64> {
    let w = &params[e.weight_offset..e.weight_offset + e.rows * e.cols];
    let b = &params[e.bias_offset..e.bias_offset + e.rows];
    (0..e.rows)
        .map(|i| {
            let row = &w[i * e.cols..(i + 1) * e.cols];
            b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

/// Accumulates weight/bias gradients for `pre = W x + b` and returns `Wᵀ d`.
fn affine_backward(params: &[f64], grad: &mut [f64], e: &LayoutEntry, x: &[f64], d: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; e.cols];
    for i in 0..e.rows {
        let di = d[i];
        if di == 0.0 {
            continue;
        }
        let w_off = e.weight_offset + i * e.cols;
        for j in 0..e.cols {
            grad[w_off + j] += di * x[j];
            dx[j] += params[w_off + j] * di;
        }
        grad[e.bias_offset + i] += di;
    }
    dx
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Network {
    /// Network with initialized weights: He-uniform for relu layers,
    /// Xavier-uniform otherwise, zero biases. Spectral layers are normalized
    /// right away.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let n_params = layout.iter().flatten().map(LayoutEntry::len).sum();
        let mut params = vec![0.0; n_params];
        let mut rng = rng_from_seed(seed);
        for (spec_layer, entry) in spec.layers.iter().zip(&layout) {
            let Some(e) = entry else { continue };
            let limit = match spec_layer {
                LayerSpec::Dense { activation: Activation::Relu, .. }
                | LayerSpec::SpectralDense { activation: Activation::Relu, .. }
                | LayerSpec::Residual { activation: Activation::Relu, .. } => {
                    (6.0 / e.cols as f64).sqrt()
                }
                _ => (6.0 / (e.cols + e.rows) as f64).sqrt(),
            };
            for w in &mut params[e.weight_offset..e.weight_offset + e.rows * e.cols] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        let spectral_vectors = vec![None; spec.layers.len()];
        let mut net = Self {
            spec,
            params,
            layout,
            spectral_vectors,
        };
        net.spectral_normalize();
        Ok(net)
    }

    /// Network with explicit parameters.
    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let n: usize = layout.iter().flatten().map(LayoutEntry::len).sum();
        if params.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: params.len(),
            });
        }
        let spectral_vectors = vec![None; spec.layers.len()];
        Ok(Self {
            spec,
            params,
            layout,
            spectral_vectors,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Copy of this network carrying different parameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        self.layout.iter().flatten().copied().collect()
    }

    /// Weight matrix of layer `layer` (`rows × cols`), if it has one.
    pub fn weight_matrix(&self, layer: usize) -> Option<Matrix> {
        let e = self.layout.get(layer)?.as_ref()?;
        Some(Matrix::from_row_slice(
            e.rows,
            e.cols,
            &self.params[e.weight_offset..e.weight_offset + e.rows * e.cols],
        ))
    }

    pub fn set_weight_matrix(&mut self, layer: usize, w: &Matrix) -> Result<()> {
        let e = self.layout[layer].ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} has no weights"))
        })?;
        if w.shape() != (e.rows, e.cols) {
            return Err(Error::DimensionMismatch {
                expected: e.rows * e.cols,
                actual: w.len(),
            });
        }
        for i in 0..e.rows {
            for j in 0..e.cols {
                self.params[e.weight_offset + i * e.cols + j] = w[(i, j)];
            }
        }
        Ok(())
    }

    pub fn set_bias(&mut self, layer: usize, b: &[f64]) -> Result<()> {
        let e = self.layout[layer].ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} has no weights"))
        })?;
        if b.len() != e.rows {
            return Err(Error::DimensionMismatch {
                expected: e.rows,
                actual: b.len(),
            });
        }
        self.params[e.bias_offset..e.bias_offset + e.rows].copy_from_slice(b);
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn run(&self, x: &[f64], mode: Mode, rng: Option<&mut Rng>, stop_before_output: bool) -> Tape {
        let mut rng = rng;
        let mut a = x.to_vec();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        for (layer, entry) in self.spec.layers.iter().zip(&self.layout) {
            if stop_before_output && layer.is_output() {
                break;
            }
            match layer {
                LayerSpec::Dense { activation, .. } | LayerSpec::SpectralDense { activation, .. } => {
                    let e = entry.as_ref().unwrap();
                    let pre = matvec(&self.params, e, &a);
                    let out = pre.iter().map(|&z| activation.apply(z)).collect();
                    caches.push(Cache::Affine { input: a, pre });
                    a = out;
                }
                LayerSpec::Residual { activation, .. } => {
                    let e = entry.as_ref().unwrap();
                    let pre = matvec(&self.params, e, &a);
                    let out = a.iter().zip(&pre).map(|(x, &z)| x + activation.apply(z)).collect();
                    caches.push(Cache::Affine { input: a, pre });
                    a = out;
                }
                LayerSpec::Dropout { rate } => {
                    let active = mode != Mode::Eval && *rate > 0.0;
                    match (active, rng.as_deref_mut()) {
                        (true, Some(r)) => {
                            let keep = 1.0 / (1.0 - rate);
                            let mask: Vec<f64> = (0..a.len())
                                .map(|_| if r.random::<f64>() < *rate { 0.0 } else { keep })
                                .collect();
                            for (v, m) in a.iter_mut().zip(&mask) {
                                *v *= m;
                            }
                            caches.push(Cache::Dropout { mask: Some(mask) });
                        }
                        _ => caches.push(Cache::Dropout { mask: None }),
                    }
                }
                LayerSpec::GaussianOutput | LayerSpec::ScalarOutput => {
                    let e = entry.as_ref().unwrap();
                    let pre = matvec(&self.params, e, &a);
                    let out = if matches!(layer, LayerSpec::GaussianOutput) {
                        vec![pre[0], softplus(pre[1]) + VARIANCE_FLOOR]
                    } else {
                        vec![pre[0]]
                    };
                    caches.push(Cache::Output { input: a, pre });
                    a = out;
                }
            }
        }
        Tape { caches, output: a }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the tape's output) and adds
    /// the parameter gradient into `grad`.
    fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut [f64]) {
        let mut d = d_out.to_vec();
        for (idx, cache) in tape.caches.iter().enumerate().rev() {
            let layer = &self.spec.layers[idx];
            let entry = self.layout[idx].as_ref();
            match (layer, cache) {
                (
                    LayerSpec::Dense { activation, .. } | LayerSpec::SpectralDense { activation, .. },
                    Cache::Affine { input, pre },
                ) => {
                    let dz: Vec<f64> = d.iter().zip(pre).map(|(g, &z)| g * activation.derivative(z)).collect();
                    d = affine_backward(&self.params, grad, entry.unwrap(), input, &dz);
                }
                (LayerSpec::Residual { activation, .. }, Cache::Affine { input, pre }) => {
                    let dz: Vec<f64> = d.iter().zip(pre).map(|(g, &z)| g * activation.derivative(z)).collect();
                    let dx = affine_backward(&self.params, grad, entry.unwrap(), input, &dz);
                    for (a, b) in d.iter_mut().zip(dx) {
                        *a += b;
                    }
                }
                (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        for (g, m) in d.iter_mut().zip(mask) {
                            *g *= m;
                        }
                    }
                }
                (LayerSpec::GaussianOutput, Cache::Output { input, pre }) => {
                    let dz = [d[0], d[1] * sigmoid(pre[1])];
                    d = affine_backward(&self.params, grad, entry.unwrap(), input, &dz);
                }
                (LayerSpec::ScalarOutput, Cache::Output { input, .. }) => {
                    d = affine_backward(&self.params, grad, entry.unwrap(), input, &d[..1]);
                }
                _ => unreachable!("cache does not match layer"),
            }
        }
    }

    /// Forward pass. `rng` supplies dropout masks in [`Mode::Train`] and
    /// [`Mode::EvalWithDropout`]; it is not touched in [`Mode::Eval`].
    pub fn forward(&self, x: &[f64], mode: Mode, rng: &mut Rng) -> Result<Output> {
        self.check_input(x)?;
        Ok(self.to_output(&self.run(x, mode, Some(rng), false).output))
    }

    /// Deterministic eval-mode forward pass.
    pub fn predict(&self, x: &[f64]) -> Result<Output> {
        self.check_input(x)?;
        Ok(self.to_output(&self.run(x, Mode::Eval, None, false).output))
    }

    /// Representation entering the output layer (eval mode).
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x, Mode::Eval, None, true).output)
    }

    /// Feature vector plus a closure-free handle for backpropagating a
    /// feature-space gradient into the parameter gradient.
    pub(crate) fn features_with_grad(&self, x: &[f64], d_features: impl FnOnce(&[f64]) -> Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        let tape = self.run(x, Mode::Eval, None, true);
        let d = d_features(&tape.output);
        self.backward(&tape, &d, grad);
        tape.output
    }

    fn to_output(&self, out: &[f64]) -> Output {
        Output {
            mean: out[0],
            variance: out.get(1).copied(),
        }
    }

    fn sample_loss(&self, loss: Loss, out: &[f64], y: f64) -> Result<(f64, Vec<f64>)> {
        match (loss, out.len()) {
            (Loss::Mse, 1) => {
                let r = out[0] - y;
                Ok((r * r, vec![2.0 * r]))
            }
            (Loss::Mse, _) => {
                let r = out[0] - y;
                Ok((r * r, vec![2.0 * r, 0.0]))
            }
            (Loss::Nll, 2) => {
                let (mu, var) = (out[0], out[1]);
                let r = y - mu;
                let value = 0.5 * var.ln() + r * r / (2.0 * var);
                let d_mu = -r / var;
                let d_var = 0.5 / var - r * r / (2.0 * var * var);
                Ok((value, vec![d_mu, d_var]))
            }
            (Loss::Nll, _) => Err(Error::InvalidArgument(
                "NLL loss requires a Gaussian output layer".into(),
            )),
        }
    }

    fn batch_loss_grad(
        &self,
        x: &Matrix,
        y: &Vector,
        rows: &[usize],
        loss: Loss,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let scale = 1.0 / rows.len() as f64;
        let mut xi = vec![0.0; x.ncols()];
        for &i in rows {
            for (j, v) in xi.iter_mut().enumerate() {
                *v = x[(i, j)];
            }
            let tape = self.run(&xi, mode, rng.as_deref_mut(), false);
            let (value, d_out) = self.sample_loss(loss, &tape.output, y[i])?;
            total += value;
            let d_out: Vec<f64> = d_out.iter().map(|g| g * scale).collect();
            self.backward(&tape, &d_out, &mut grad);
        }
        Ok((total * scale, grad))
    }

    /// Mean loss over all rows of `(x, y)` and its gradient, eval mode.
    /// NLL is `½ ln σ² + (y − μ)²/(2σ²)` per sample, without the constant.
    pub fn loss_and_grad(&self, x: &Matrix, y: &Vector, loss: Loss) -> Result<(f64, Vec<f64>)> {
        self.check_data(x, y)?;
        let rows: Vec<usize> = (0..x.nrows()).collect();
        self.batch_loss_grad(x, y, &rows, loss, Mode::Eval, None)
    }

    /// Like [`loss_and_grad`](Self::loss_and_grad) but with dropout masks
    /// drawn from `rng` as during training.
    pub fn loss_and_grad_train_mode(&self, x: &Matrix, y: &Vector, loss: Loss, rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        self.check_data(x, y)?;
        let rows: Vec<usize> = (0..x.nrows()).collect();
        self.batch_loss_grad(x, y, &rows, loss, Mode::Train, Some(rng))
    }

    pub fn loss(&self, x: &Matrix, y: &Vector, loss: Loss) -> Result<f64> {
        self.check_data(x, y)?;
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let out = self.run(&xi, Mode::Eval, None, false).output;
            total += self.sample_loss(loss, &out, y[i])?.0;
        }
        Ok(total / x.nrows() as f64)
    }

    fn check_data(&self, x: &Matrix, y: &Vector) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        if x.ncols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Minibatch training. Shuffling and dropout masks come from
    /// `config.seed`; spectral layers are re-normalized after every step.
    pub fn train(&mut self, x: &Matrix, y: &Vector, config: &TrainConfig) -> Result<TrainReport> {
        config.validate()?;
        self.check_data(x, y)?;
        let mut rng = rng_from_seed(derive_seed(config.seed, 0x7a11));
        let mut optimizer = OptimizerState::new(config.optimizer, self.params.len());
        let mut history = Vec::with_capacity(config.epochs + 1);
        let initial = self.loss(x, y, config.loss)?;
        if !initial.is_finite() {
            return Err(Error::Divergence { epoch: 0 });
        }
        history.push(initial);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        let has_spectral = self.spec.layers.iter().any(|l| l.spectral_bound().is_some());
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let (value, grad) =
                    self.batch_loss_grad(x, y, batch, config.loss, Mode::Train, Some(&mut rng))?;
                if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence { epoch });
                }
                optimizer.step(&mut self.params, &grad, config.learning_rate);
                if has_spectral {
                    self.spectral_normalize();
                }
            }
            let value = self.loss(x, y, config.loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            history.push(value);
        }
        Ok(TrainReport {
            loss_history: history,
        })
    }

    /// Rescales every spectrally bounded weight `W` to `γ W / ‖W‖₂` when its
    /// spectral norm exceeds `γ`; layers under the bound are left untouched.
    /// The estimate is warm-started from the previous call's singular vector.
    pub fn spectral_normalize(&mut self) {
        for idx in 0..self.spec.layers.len() {
            let Some(bound) = self.spec.layers[idx].spectral_bound() else {
                continue;
            };
            let e = self.layout[idx].unwrap();
            let w = self.weight_matrix(idx).unwrap();
            let start = self.spectral_vectors[idx]
                .clone()
                .unwrap_or_else(|| crate::numerics::default_start(e.cols));
            let est = power_iteration_from(&w, &start, 500, 1e-10);
            self.spectral_vectors[idx] = Some(est.right.clone());
            if est.sigma > bound * (1.0 + 1e-9) {
                let factor = bound / est.sigma;
                for v in &mut self.params[e.weight_offset..e.weight_offset + e.rows * e.cols] {
                    *v *= factor;
                }
            }
        }
    }

    pub fn to_saved(&self) -> SavedNetwork {
        SavedNetwork {
            spec: self.spec.clone(),
            layout: self.layout(),
            params: self.params.clone(),
        }
    }

    pub fn from_saved(saved: SavedNetwork) -> Result<Self> {
        let net = Self::from_params(saved.spec, saved.params)?;
        if net.layout() != saved.layout {
            return Err(Error::Schema("stored layout does not match the spec".into()));
        }
        Ok(net)
    }
}

/// On-disk network: spec, layout table and flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedNetwork {
    pub spec: NetworkSpec,
    pub layout: Vec<LayoutEntry>,
    pub params: Vec<f64>,
}

/// SGD or Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) over a flat vector.
pub(crate) struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub(crate) fn new(kind: Optimizer, n: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::Adam => (vec![0.0; n], vec![0.0; n]),
            Optimizer::Sgd => (Vec::new(), Vec::new()),
        };
        Self { kind, m, v, t: 0 }
    }

    /// Descent step `params -= lr * direction(grad)`.
    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::standard_normal;
    use approx::assert_relative_eq;

    fn linear_spec() -> NetworkSpec {
        NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::ScalarOutput],
        }
    }

    #[test]
    fn identity_network() {
        let net = Network::from_params(linear_spec(), vec![1.0, 0.0]).unwrap();
        assert_eq!(net.predict(&[3.0]).unwrap().mean, 3.0);
    }

    #[test]
    fn softplus_head_at_zero() {
        let spec = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::GaussianOutput],
        };
        let net = Network::from_params(spec, vec![0.0; 4]).unwrap();
        let out = net.predict(&[2.0]).unwrap();
        assert_relative_eq!(out.variance.unwrap(), 2f64.ln() + 1e-6, epsilon = 1e-15);
    }

    #[test]
    fn zero_rate_dropout_is_transparent() {
        let base = NetworkSpec {
            input_dim: 2,
            layers: vec![
                LayerSpec::Dense { width: 4, activation: Activation::Tanh },
                LayerSpec::ScalarOutput,
            ],
        };
        let mut with = base.clone();
        with.layers.insert(1, LayerSpec::Dropout { rate: 0.0 });
        let a = Network::new(base, 3).unwrap();
        let b = Network::from_params(with, a.params().to_vec()).unwrap();
        let mut rng = rng_from_seed(1);
        for mode in [Mode::Train, Mode::Eval, Mode::EvalWithDropout] {
            let x = [0.3, -0.7];
            assert_eq!(a.predict(&x).unwrap(), b.forward(&x, mode, &mut rng).unwrap());
        }
    }

    #[test]
    fn spec_validation() {
        let no_output = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::Dense { width: 2, activation: Activation::Relu }],
        };
        assert!(no_output.validate().is_err());
        let bad_rate = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::Dropout { rate: 1.0 }, LayerSpec::ScalarOutput],
        };
        assert!(bad_rate.validate().is_err());
        let bad_residual = NetworkSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::Residual { width: 4, activation: Activation::Relu, spectral_bound: None },
                LayerSpec::ScalarOutput,
            ],
        };
        assert!(bad_residual.validate().is_err());
        let two_outputs = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::ScalarOutput, LayerSpec::GaussianOutput],
        };
        assert!(two_outputs.validate().is_err());
        assert!(NetworkSpec::dense_stack_preset(1000).validate().is_ok());
    }

    #[test]
    fn dense_stack_preset_parameter_count() {
        let net = Network::new(NetworkSpec::dense_stack_preset(1000), 0).unwrap();
        assert_eq!(net.n_params(), 113_332);
    }

    #[test]
    fn residual_with_zero_weights_is_identity() {
        let spec = NetworkSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::Residual { width: 3, activation: Activation::Tanh, spectral_bound: None },
                LayerSpec::Residual { width: 3, activation: Activation::Relu, spectral_bound: None },
                LayerSpec::ScalarOutput,
            ],
        };
        let mut net = Network::new(spec, 5).unwrap();
        net.set_weight_matrix(0, &Matrix::zeros(3, 3)).unwrap();
        net.set_weight_matrix(1, &Matrix::zeros(3, 3)).unwrap();
        let x = [0.4, -1.2, 2.5];
        assert_eq!(net.features(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn dimension_mismatch() {
        let net = Network::new(linear_spec(), 0).unwrap();
        assert!(matches!(net.predict(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_loss_cases() {
        let spec = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::GaussianOutput],
        };
        // raw variance so that softplus(raw) + floor = 1
        let raw = (1.0f64 - VARIANCE_FLOOR).exp_m1().ln();
        let net = Network::from_params(spec, vec![1.0, 0.0, 0.0, raw]).unwrap();
        let x = Matrix::from_element(1, 1, 0.5);
        let y = Vector::from_element(1, 0.5);
        let (nll, _) = net.loss_and_grad(&x, &y, Loss::Nll).unwrap();
        assert!(nll.abs() < 1e-15);
        let (mse, _) = net.loss_and_grad(&x, &y, Loss::Mse).unwrap();
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn nll_needs_gaussian_head() {
        let net = Network::new(linear_spec(), 0).unwrap();
        let x = Matrix::from_element(1, 1, 0.5);
        assert!(net.loss_and_grad(&x, &Vector::from_element(1, 0.0), Loss::Nll).is_err());
    }

    fn check_gradient(net: &Network, x: &Matrix, y: &Vector, loss: Loss, dropout_seed: Option<u64>) {
        let eval = |n: &Network| -> (f64, Vec<f64>) {
            match dropout_seed {
                Some(s) => n.loss_and_grad_train_mode(x, y, loss, &mut rng_from_seed(s)).unwrap(),
                None => n.loss_and_grad(x, y, loss).unwrap(),
            }
        };
        let (_, g) = eval(net);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..net.n_params() {
            let mut up = net.params().to_vec();
            up[i] += h;
            let mut dn = net.params().to_vec();
            dn[i] -= h;
            let fd = (eval(&net.with_params(&up).unwrap()).0 - eval(&net.with_params(&dn).unwrap()).0) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_for_every_layer_type() {
        let mut rng = rng_from_seed(77);
        let spec = NetworkSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::Dense { width: 5, activation: Activation::Tanh },
                LayerSpec::Residual { width: 5, activation: Activation::Tanh, spectral_bound: None },
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::SpectralDense { width: 4, activation: Activation::Tanh, bound: 0.9 },
                LayerSpec::Dense { width: 4, activation: Activation::Identity },
                LayerSpec::GaussianOutput,
            ],
        };
        for trial in 0..5 {
            let net = Network::new(spec.clone(), trial).unwrap();
            let x = Matrix::from_fn(5, 3, |_, _| standard_normal(&mut rng));
            let y = Vector::from_fn(5, |_, _| standard_normal(&mut rng));
            check_gradient(&net, &x, &y, Loss::Nll, None);
            check_gradient(&net, &x, &y, Loss::Mse, None);
            check_gradient(&net, &x, &y, Loss::Nll, Some(trial + 100));
        }
    }

    #[test]
    fn relu_two_layer_gradient() {
        let mut rng = rng_from_seed(78);
        let spec = NetworkSpec {
            input_dim: 2,
            layers: vec![
                LayerSpec::Dense { width: 6, activation: Activation::Relu },
                LayerSpec::Dense { width: 6, activation: Activation::Relu },
                LayerSpec::ScalarOutput,
            ],
        };
        let net = Network::new(spec, 9).unwrap();
        let x = Matrix::from_fn(5, 2, |_, _| standard_normal(&mut rng));
        let y = Vector::from_fn(5, |_, _| standard_normal(&mut rng));
        check_gradient(&net, &x, &y, Loss::Mse, None);
    }

    #[test]
    fn learns_linear_map() {
        let x = Matrix::from_fn(50, 1, |i, _| -1.0 + 2.0 * i as f64 / 49.0);
        let y = x.column(0).map(|v| 2.0 * v);
        let mut net = Network::new(linear_spec(), 1).unwrap();
        let config = TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 10,
            seed: 3,
            loss: Loss::Mse,
        };
        let report = net.train(&x, &y, &config).unwrap();
        assert!((net.params()[0] - 2.0).abs() < 0.05, "w = {}", net.params()[0]);
        assert!(report.loss_history.last().unwrap() < &report.loss_history[0]);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let spec = NetworkSpec::resnet(
            2,
            &ResNetOptions { width: 8, blocks: 2, spectral_bound: Some(0.9), dropout_rate: Some(0.1), ..Default::default() },
        );
        let mut net = Network::new(spec, 4).unwrap();
        let before = net.params().to_vec();
        let x = Matrix::from_fn(20, 2, |i, j| (i * 2 + j) as f64 * 0.1);
        let y = Vector::from_fn(20, |i, _| i as f64 * 0.05);
        let config = TrainConfig { learning_rate: 0.0, epochs: 3, ..Default::default() };
        net.train(&x, &y, &config).unwrap();
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = NetworkSpec::resnet(1, &ResNetOptions { width: 8, blocks: 1, dropout_rate: Some(0.2), ..Default::default() });
        let x = Matrix::from_fn(30, 1, |i, _| i as f64 / 10.0);
        let y = x.column(0).map(|v| v.sin());
        let config = TrainConfig { epochs: 5, learning_rate: 0.01, ..Default::default() };
        let mut a = Network::new(spec.clone(), 2).unwrap();
        let mut b = Network::new(spec, 2).unwrap();
        a.train(&x, &y, &config).unwrap();
        b.train(&x, &y, &config).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let spec = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::Dense { width: 4, activation: Activation::Identity }, LayerSpec::ScalarOutput],
        };
        let mut net = Network::new(spec, 0).unwrap();
        let x = Matrix::from_fn(10, 1, |i, _| 100.0 * i as f64);
        let y = Vector::from_fn(10, |i, _| 1e3 * i as f64);
        let config = TrainConfig { optimizer: Optimizer::Sgd, learning_rate: 10.0, epochs: 50, loss: Loss::Mse, ..Default::default() };
        match net.train(&x, &y, &config) {
            Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn spectral_normalize_diagonal() {
        let spec = NetworkSpec {
            input_dim: 2,
            layers: vec![
                LayerSpec::SpectralDense { width: 2, activation: Activation::Identity, bound: 1.0 },
                LayerSpec::ScalarOutput,
            ],
        };
        let mut net = Network::new(spec, 0).unwrap();
        net.set_weight_matrix(0, &Matrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0])).unwrap();
        net.spectral_normalize();
        let w = net.weight_matrix(0).unwrap();
        assert_relative_eq!(w[(0, 0)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(w[(1, 1)], 1.0 / 3.0, epsilon = 1e-9);

        let under = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.2]);
        net.set_weight_matrix(0, &under).unwrap();
        net.spectral_normalize();
        assert_eq!(net.weight_matrix(0).unwrap(), under);
    }

    #[test]
    fn spectral_normalize_random_matches_svd() {
        let spec = NetworkSpec {
            input_dim: 6,
            layers: vec![
                LayerSpec::SpectralDense { width: 5, activation: Activation::Relu, bound: 0.9 },
                LayerSpec::ScalarOutput,
            ],
        };
        let mut rng = rng_from_seed(6);
        let mut net = Network::new(spec, 0).unwrap();
        for _ in 0..10 {
            let w = Matrix::from_fn(5, 6, |_, _| 2.0 * standard_normal(&mut rng));
            net.set_weight_matrix(0, &w).unwrap();
            net.spectral_normalize();
            let s = net.weight_matrix(0).unwrap().svd(false, false).singular_values.max();
            assert!(s >= 0.9 * (1.0 - 1e-3) && s <= 0.9 * (1.0 + 1e-3), "{s}");
        }
    }

    #[test]
    fn dropout_zero_fraction() {
        let spec = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::Dropout { rate: 0.3 }, LayerSpec::ScalarOutput],
        };
        let net = Network::from_params(spec, vec![1.0, 0.0]).unwrap();
        let mut rng = rng_from_seed(10);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| net.forward(&[1.0], Mode::Train, &mut rng).unwrap().mean == 0.0)
            .count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
    }

    #[test]
    fn eval_mode_is_pure() {
        let spec = NetworkSpec::resnet(2, &ResNetOptions { width: 6, blocks: 2, dropout_rate: Some(0.5), ..Default::default() });
        let net = Network::new(spec, 8).unwrap();
        let mut r1 = rng_from_seed(1);
        let mut r2 = rng_from_seed(2);
        let a = net.forward(&[0.1, 0.2], Mode::Eval, &mut r1).unwrap();
        let b = net.forward(&[0.1, 0.2], Mode::Eval, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn saved_network_roundtrip() {
        let spec = NetworkSpec::resnet(3, &ResNetOptions { width: 4, blocks: 1, ..Default::default() });
        let net = Network::new(spec, 12).unwrap();
        let json = serde_json::to_string(&net.to_saved()).unwrap();
        let back = Network::from_saved(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.predict(&[1.0, 2.0, 3.0]).unwrap(), net.predict(&[1.0, 2.0, 3.0]).unwrap());
    }
}
