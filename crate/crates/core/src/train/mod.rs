//! Minimal masked-MLP training engine: linear layers with ReLU hidden
//! activations, softmax cross-entropy, SGD with momentum and L2 decay, and
//! periodic RigL/SRigL connectivity updates driven by dense-gradient
//! snapshots.
//!
//! Weights at masked-off positions are stored as exact zeros and stay zero
//! through every optimizer step; sparse layers can run their forward pass
//! either through the dense masked representation or through the condensed
//! kernel, and the two agree within floating-point reordering error.

pub mod data;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condensed::{CondensedMatrix, DenseMaskedMatrix};
use crate::dense::DenseMatrix;
use crate::flops::{
    self, ArchLayer, ArchitectureSpec, LayerKind, TrainingCostModel,
};
use crate::topology::{
    erk_sparsities, AblationPolicy, LayerShape, LayerTopology, SaliencySnapshot, SparsityMode,
    TopologyError, UpdateRecord, UpdateSchedule,
};
use data::{BlobConfig, BlobTask, DataSource, IdxConfig, IdxTask};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("divergence detected at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Training regime: dense baseline or one of the two sparse methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Dense,
    Rigl,
    Srigl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityDistribution {
    Uniform,
    Erk,
}

/// Which multiplication path sparse layers use in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardKernel {
    DenseMasked,
    Condensed,
}

/// Constant or piecewise-constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant(f64),
    /// `values[i]` applies before `boundaries[i]`; `values.len()` must be
    /// `boundaries.len() + 1`.
    Piecewise {
        boundaries: Vec<u64>,
        values: Vec<f64>,
    },
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Piecewise { boundaries, values } => {
                let idx = boundaries.iter().filter(|&&b| t >= b).count();
                values[idx]
            }
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        match self {
            LrSchedule::Constant(lr) if *lr > 0.0 => Ok(()),
            LrSchedule::Constant(lr) => {
                Err(TrainError::Config(format!("lr {lr} must be positive")))
            }
            LrSchedule::Piecewise { boundaries, values } => {
                if values.len() != boundaries.len() + 1 {
                    return Err(TrainError::Config(
                        "piecewise lr needs values.len() == boundaries.len() + 1".into(),
                    ));
                }
                if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(TrainError::Config(
                        "piecewise lr boundaries must be strictly increasing".into(),
                    ));
                }
                if values.iter().any(|&v| v <= 0.0) {
                    return Err(TrainError::Config("lr values must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// Connectivity-update cadence parameters (combined with `total_steps` into
/// an [`UpdateSchedule`] at run time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateParams {
    #[serde(default = "default_delta_t")]
    pub delta_t: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_end_fraction")]
    pub end_fraction: f64,
}

fn default_delta_t() -> u64 {
    100
}

fn default_alpha() -> f64 {
    0.3
}

fn default_end_fraction() -> f64 {
    0.75
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self {
            delta_t: default_delta_t(),
            alpha: default_alpha(),
            end_fraction: default_end_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationParams {
    #[serde(default = "default_gamma_sal")]
    pub gamma_sal: f64,
}

fn default_gamma_sal() -> f64 {
    0.3
}

impl Default for AblationParams {
    fn default() -> Self {
        Self {
            gamma_sal: default_gamma_sal(),
        }
    }
}

/// Data source selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Blobs(BlobConfig),
    Idx(IdxConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Hidden layer widths; may be empty for a single linear layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Global sparsity for the sparse modes.
    #[serde(default)]
    pub sparsity: f64,
    #[serde(default = "default_distribution")]
    pub distribution: SparsityDistribution,
    /// Keep the first layer dense, excluding it from the sparsity budget.
    #[serde(default)]
    pub dense_first_layer: bool,
    #[serde(default)]
    pub update: UpdateParams,
    #[serde(default)]
    pub ablation: AblationParams,
    /// Mini-batch steps over which dense gradients are averaged before each
    /// connectivity update.
    #[serde(default = "default_grad_accum")]
    pub grad_accum: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_kernel")]
    pub kernel: ForwardKernel,
    pub data: DataConfig,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_distribution() -> SparsityDistribution {
    SparsityDistribution::Erk
}

fn default_grad_accum() -> u64 {
    1
}

fn default_eval_every() -> u64 {
    100
}

fn default_kernel() -> ForwardKernel {
    ForwardKernel::DenseMasked
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.total_steps == 0 {
            return err("total_steps must be >= 1".into());
        }
        self.lr.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if self.eval_every == 0 {
            return err("eval_every must be >= 1".into());
        }
        if self.mode != TrainMode::Dense {
            if !(0.0 < self.sparsity && self.sparsity < 1.0) {
                return err(format!(
                    "mode {:?} requires sparsity in (0, 1), got {}",
                    self.mode, self.sparsity
                ));
            }
            UpdateSchedule::new(
                self.update.delta_t,
                self.update.alpha,
                self.update.end_fraction,
                self.total_steps,
            )?;
            AblationPolicy::new(self.ablation.gamma_sal)?;
            if self.grad_accum == 0 || self.grad_accum > self.update.delta_t {
                return err(format!(
                    "grad_accum {} outside [1, delta_t = {}]",
                    self.grad_accum, self.update.delta_t
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            serde_json::from_str(json).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// One linear layer: dense weights (masked positions exactly zero), dense
/// bias, and the mask state for sparse layers.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub weights: DenseMatrix<f64>,
    pub bias: Vec<f64>,
    pub topology: Option<LayerTopology>,
}

impl LayerState {
    pub fn n_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_in(&self) -> usize {
        self.weights.cols()
    }

    fn masked(&self) -> Result<DenseMaskedMatrix<f64>, TrainError> {
        let mask = match &self.topology {
            Some(t) => t.mask().to_vec(),
            None => vec![true; self.weights.rows() * self.weights.cols()],
        };
        DenseMaskedMatrix::new(self.weights.clone(), mask)
            .map_err(|e| TrainError::Data(e.to_string()))
    }

    /// Condensed view of a constant fan-in layer.
    pub fn condensed(&self) -> Result<Option<CondensedMatrix<f64>>, TrainError> {
        match &self.topology {
            Some(t) if t.mode() == SparsityMode::ConstantFanIn => {
                let c = CondensedMatrix::from_dense(&self.masked()?)
                    .map_err(|e| TrainError::Data(e.to_string()))?;
                Ok(Some(c))
            }
            _ => Ok(None),
        }
    }
}

/// Feed-forward network with ReLU hidden activations and identity output.
#[derive(Debug, Clone)]
pub struct MlpModel {
    pub layers: Vec<LayerState>,
}

impl MlpModel {
    /// Builds masks per the config (weights still zero; see [`sparse_init`]).
    pub fn build<R: Rng>(
        config: &TrainConfig,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(classes);

        let n_layers = dims.len() - 1;
        let sparse_layer: Vec<bool> = (0..n_layers)
            .map(|l| {
                config.mode != TrainMode::Dense && !(config.dense_first_layer && l == 0)
            })
            .collect();

        // distribute the global sparsity over the sparse layers
        let sparse_shapes: Vec<LayerShape> = (0..n_layers)
            .filter(|&l| sparse_layer[l])
            .map(|l| LayerShape::Linear {
                n_in: dims[l],
                n_out: dims[l + 1],
            })
            .collect();
        let sparse_sparsities = match config.distribution {
            SparsityDistribution::Erk => erk_sparsities(&sparse_shapes, config.sparsity)?,
            SparsityDistribution::Uniform => vec![config.sparsity; sparse_shapes.len()],
        };

        let mut layers = Vec::with_capacity(n_layers);
        let mut sparse_idx = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let topology = if sparse_layer[l] {
                let s = sparse_sparsities[sparse_idx];
                sparse_idx += 1;
                let params = n_in * n_out;
                Some(match config.mode {
                    TrainMode::Rigl => {
                        let nnz = (((1.0 - s) * params as f64).round() as usize)
                            .clamp(1, params);
                        LayerTopology::unstructured(n_out, n_in, nnz, rng)?
                    }
                    TrainMode::Srigl => {
                        let k = (((1.0 - s) * n_in as f64).round() as usize).clamp(1, n_in);
                        LayerTopology::constant_fan_in(n_out, n_in, k, rng)?
                    }
                    TrainMode::Dense => unreachable!(),
                })
            } else {
                None
            };
            layers.push(LayerState {
                weights: DenseMatrix::zeros(n_out, n_in),
                bias: vec![0.0; n_out],
                topology,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out())
    }

    /// Asserts that weights at masked-off positions are exactly zero.
    pub fn assert_mask_invariant(&self) {
        for (li, layer) in self.layers.iter().enumerate() {
            if let Some(topo) = &layer.topology {
                for (f, (&w, &m)) in layer
                    .weights
                    .as_slice()
                    .iter()
                    .zip(topo.mask())
                    .enumerate()
                {
                    assert!(
                        m || w == 0.0,
                        "layer {li}: non-zero weight {w} at masked position {f}"
                    );
                }
            }
        }
    }
}

/// Fan-in-scaled Gaussian initialization of the active weights: the variance
/// is `2 / k` with `k` the mean active fan-in of the layer (`n_in` for dense
/// layers). Inactive positions stay exactly zero; biases start at zero.
pub fn sparse_init<R: Rng>(model: &mut MlpModel, rng: &mut R) {
    for layer in &mut model.layers {
        let (n_out, n_in) = (layer.n_out(), layer.n_in());
        let mean_fan_in = match &layer.topology {
            Some(t) => {
                let rows = t.n_active().max(1);
                t.nnz() as f64 / rows as f64
            }
            None => n_in as f64,
        };
        let sigma = (2.0 / mean_fan_in.max(1.0)).sqrt();
        for i in 0..n_out {
            for j in 0..n_in {
                let active = layer
                    .topology
                    .as_ref()
                    .map_or(true, |t| t.mask_at(i, j));
                if active {
                    let z: f64 = StandardNormal.sample(rng);
                    layer.weights.set(i, j, sigma * z);
                }
            }
        }
        layer.bias.fill(0.0);
    }
}

/// Per-layer pre-activations and layer inputs cached by the forward pass.
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l` (`n_in x batch`).
    pub inputs: Vec<DenseMatrix<f64>>,
    /// `preacts[l]` is `W_l inputs[l] + b_l`.
    pub preacts: Vec<DenseMatrix<f64>>,
}

/// Forward pass over a column-major batch (`input_dim x batch`).
///
/// Hidden layers apply ReLU; the output layer is identity (softmax lives in
/// the loss). With `ForwardKernel::Condensed`, constant fan-in layers
/// multiply through the condensed representation instead of the dense
/// masked weights.
pub fn forward(
    model: &MlpModel,
    input: &DenseMatrix<f64>,
    kernel: ForwardKernel,
) -> Result<(DenseMatrix<f64>, ForwardCache), TrainError> {
    if input.rows() != model.input_dim() {
        return Err(TrainError::DimensionMismatch {
            expected: model.input_dim(),
            got: input.rows(),
        });
    }
    let batch = input.cols();
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(model.layers.len()),
        preacts: Vec::with_capacity(model.layers.len()),
    };
    let mut activation = input.clone();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = match (kernel, layer.condensed()?) {
            (ForwardKernel::Condensed, Some(c)) => c
                .matmul(&activation)
                .map_err(|e| TrainError::Data(e.to_string()))?,
            _ => layer.weights.matmul(&activation),
        };
        for i in 0..layer.n_out() {
            let b = layer.bias[i];
            for v in z.row_mut(i) {
                *v += b;
            }
        }
        cache.inputs.push(activation);
        cache.preacts.push(z.clone());
        if l < last {
            for v in z.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        activation = z;
        debug_assert_eq!(activation.cols(), batch);
    }
    Ok((activation, cache))
}

/// Mean softmax cross-entropy with optional label smoothing; returns the
/// loss and the gradient w.r.t. the logits (already divided by the batch).
pub fn softmax_cross_entropy(
    logits: &DenseMatrix<f64>,
    labels: &[usize],
    smoothing: f64,
) -> (f64, DenseMatrix<f64>) {
    let classes = logits.rows();
    let batch = logits.cols();
    assert_eq!(labels.len(), batch, "one label per column");
    let mut dlogits = DenseMatrix::zeros(classes, batch);
    let mut loss = 0.0;
    let off_target = smoothing / classes as f64;
    let on_target = 1.0 - smoothing + off_target;
    for c in 0..batch {
        let mut max = f64::NEG_INFINITY;
        for i in 0..classes {
            max = max.max(logits.at(i, c));
        }
        let mut z = 0.0;
        for i in 0..classes {
            z += (logits.at(i, c) - max).exp();
        }
        let log_z = z.ln();
        for i in 0..classes {
            let log_p = logits.at(i, c) - max - log_z;
            let p = log_p.exp();
            let target = if i == labels[c] { on_target } else { off_target };
            loss -= target * log_p;
            dlogits.set(i, c, (p - target) / batch as f64);
        }
    }
    (loss / batch as f64, dlogits)
}

/// Weight and bias gradients; weight gradients are masked for sparse layers.
pub struct Gradients {
    pub weights: Vec<DenseMatrix<f64>>,
    pub bias: Vec<Vec<f64>>,
}

/// Backward pass from the logit gradient.
///
/// Returns masked gradients (dense gradients multiplied by the mask) and,
/// when `want_dense` is set, the full dense weight gradients used as the
/// regrowth criterion.
pub fn backward(
    model: &MlpModel,
    cache: &ForwardCache,
    dlogits: &DenseMatrix<f64>,
    want_dense: bool,
) -> (Gradients, Option<Vec<DenseMatrix<f64>>>) {
    let n_layers = model.layers.len();
    let mut grads = Gradients {
        weights: Vec::with_capacity(n_layers),
        bias: Vec::with_capacity(n_layers),
    };
    let mut dense_grads: Vec<DenseMatrix<f64>> = Vec::new();
    let mut weight_rev = Vec::with_capacity(n_layers);
    let mut bias_rev = Vec::with_capacity(n_layers);
    let mut dense_rev = Vec::with_capacity(n_layers);

    let batch = dlogits.cols();
    let mut delta = dlogits.clone();
    for l in (0..n_layers).rev() {
        let layer = &model.layers[l];
        let input = &cache.inputs[l];
        // dW[i][j] = sum_c delta[i][c] * input[j][c]
        let mut dw = DenseMatrix::zeros(layer.n_out(), layer.n_in());
        for i in 0..layer.n_out() {
            let drow = delta.row(i);
            let dw_row = dw.row_mut(i);
            for j in 0..layer.n_in() {
                let irow = input.row(j);
                let mut acc = 0.0;
                for c in 0..batch {
                    acc += drow[c] * irow[c];
                }
                dw_row[j] = acc;
            }
        }
        let db: Vec<f64> = (0..layer.n_out())
            .map(|i| delta.row(i).iter().sum())
            .collect();

        if want_dense {
            dense_rev.push(dw.clone());
        }
        if let Some(topo) = &layer.topology {
            for (g, &m) in dw.as_mut_slice().iter_mut().zip(topo.mask()) {
                if !m {
                    *g = 0.0;
                }
            }
        }

        if l > 0 {
            // delta_prev = (W^T delta) ⊙ relu'(preact_{l-1})
            let mut dprev = DenseMatrix::zeros(layer.n_in(), batch);
            for i in 0..layer.n_out() {
                let w_row = layer.weights.row(i);
                let d_row: Vec<f64> = delta.row(i).to_vec();
                for (j, &w) in w_row.iter().enumerate() {
                    if w != 0.0 {
                        let out = dprev.row_mut(j);
                        for c in 0..batch {
                            out[c] += w * d_row[c];
                        }
                    }
                }
            }
            let pre = &cache.preacts[l - 1];
            for (v, &z) in dprev.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if z <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = dprev;
        }
        weight_rev.push(dw);
        bias_rev.push(db);
    }
    weight_rev.reverse();
    bias_rev.reverse();
    grads.weights = weight_rev;
    grads.bias = bias_rev;
    if want_dense {
        dense_rev.reverse();
        dense_grads = dense_rev;
    }
    (
        grads,
        if want_dense { Some(dense_grads) } else { None },
    )
}

/// Momentum buffers, one per layer.
pub struct MomentumState {
    pub weights: Vec<DenseMatrix<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MomentumState {
    pub fn zeros(model: &MlpModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| DenseMatrix::zeros(l.n_out(), l.n_in()))
                .collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.n_out()]).collect(),
        }
    }

    /// Zeroes buffers at masked-off positions (after topology changes).
    fn remask(&mut self, model: &MlpModel) {
        for (v, layer) in self.weights.iter_mut().zip(&model.layers) {
            if let Some(topo) = &layer.topology {
                for (x, &m) in v.as_mut_slice().iter_mut().zip(topo.mask()) {
                    if !m {
                        *x = 0.0;
                    }
                }
            }
        }
    }
}

/// SGD with momentum and L2 weight decay at step `t`:
/// `v <- momentum v + (g + wd w)`, `w <- w - lr v`, applied to active
/// weights and biases. Masked positions have zero gradient, weight and
/// velocity, so they remain exactly zero.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut MomentumState,
    config: &TrainConfig,
    t: u64,
) {
    let lr = config.lr.at(t);
    let mu = config.momentum;
    let wd = config.weight_decay;
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let w = layer.weights.as_mut_slice();
        let g = grads.weights[l].as_slice();
        let v = state.weights[l].as_mut_slice();
        for i in 0..w.len() {
            let vi = mu * v[i] + (g[i] + wd * w[i]);
            v[i] = vi;
            w[i] -= lr * vi;
        }
        for i in 0..layer.bias.len() {
            let vi = mu * state.bias[l][i] + (grads.bias[l][i] + wd * layer.bias[i]);
            state.bias[l][i] = vi;
            layer.bias[i] -= lr * vi;
        }
    }
}

/// One metrics sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

/// Final state of one layer for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub neurons: usize,
    pub dense_in: usize,
    pub sparse: bool,
    pub params: u64,
    pub nnz: u64,
    pub k_final: Option<usize>,
    pub n_active: usize,
    pub active_fraction: f64,
    pub fan_in_histogram: Vec<(usize, usize)>,
}

/// FLOPs totals for the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub inference_dense: f64,
    pub inference_final: f64,
    pub training_total: f64,
}

/// Everything a run produces besides the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub metrics: Vec<MetricPoint>,
    pub layers: Vec<LayerReport>,
    pub topology_events: Vec<UpdateRecord>,
    pub topology_update_count: u64,
    pub flops: FlopsSummary,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: f64,
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: MlpModel,
}

/// Builds the data source named by the config and trains on it.
pub fn train_from_config(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    match &config.data {
        DataConfig::Blobs(blob) => {
            let mut data = BlobTask::new(blob, config.seed)?;
            train(config, &mut data)
        }
        DataConfig::Idx(idx) => {
            let mut data = IdxTask::load(idx, config.seed)?;
            train(config, &mut data)
        }
    }
}

/// Runs the full training loop: forward/backward, SGD, and connectivity
/// updates every `delta_t` steps while the cosine drop fraction is non-zero.
pub fn train(config: &TrainConfig, data: &mut dyn DataSource) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(1);
    let mut model = MlpModel::build(config, data.input_dim(), data.num_classes(), &mut init_rng)?;
    sparse_init(&mut model, &mut init_rng);
    let mut momentum = MomentumState::zeros(&model);

    let sparse_mode = config.mode != TrainMode::Dense;
    let schedule = if sparse_mode {
        Some(UpdateSchedule::new(
            config.update.delta_t,
            config.update.alpha,
            config.update.end_fraction,
            config.total_steps,
        )?)
    } else {
        None
    };
    let policy = AblationPolicy::new(config.ablation.gamma_sal.clamp(0.0, 1.0))?;

    let mut metrics = Vec::new();
    let mut events: Vec<UpdateRecord> = Vec::new();
    let mut update_count = 0u64;

    // dense-gradient accumulator for the window preceding each update
    let delta_t = config.update.delta_t.max(1);
    let m_accum = config.grad_accum.clamp(1, delta_t);
    let window_start = (delta_t - m_accum + 1) % delta_t;
    let mut accum: Vec<DenseMatrix<f64>> = Vec::new();
    let mut accum_count = 0u64;

    for t in 0..config.total_steps {
        let (x, y) = data.next_train_batch(config.batch_size);
        let (logits, cache) = forward(&model, &x, config.kernel)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &y, config.label_smoothing);
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step: t, loss });
        }

        let r = t % delta_t;
        let in_window = sparse_mode && (r == 0 || r >= delta_t.saturating_sub(m_accum - 1));
        let (grads, dense) = backward(&model, &cache, &dlogits, in_window);
        if in_window {
            let dense = dense.expect("dense gradients requested");
            if r == window_start || accum.is_empty() {
                accum = dense;
                accum_count = 1;
            } else {
                for (a, d) in accum.iter_mut().zip(&dense) {
                    for (av, dv) in a.as_mut_slice().iter_mut().zip(d.as_slice()) {
                        *av += dv;
                    }
                }
                accum_count += 1;
            }
        }

        let drop_fraction = schedule.map_or(0.0, |s| s.drop_fraction(t));
        let is_update_step = sparse_mode && t > 0 && r == 0 && drop_fraction > 0.0;
        let mut grads = grads;
        if is_update_step {
            let f = drop_fraction;
            let scale = 1.0 / accum_count.max(1) as f64;
            for (li, layer) in model.layers.iter_mut().enumerate() {
                let Some(topo) = layer.topology.as_mut() else {
                    continue;
                };
                let k_update = (f * topo.nnz() as f64).floor() as usize;
                let grad_avg = accum[li].map(|g| g * scale);
                let sal = SaliencySnapshot::from_raw(&layer.weights, &grad_avg, k_update);
                let outcome = match config.mode {
                    TrainMode::Rigl => topo.rigl_update(&sal)?,
                    TrainMode::Srigl => topo.srigl_update(t, &sal, &policy)?,
                    TrainMode::Dense => unreachable!(),
                };
                // prune weight values and momentum at deactivated positions
                for (w, &msk) in layer.weights.as_mut_slice().iter_mut().zip(topo.mask()) {
                    if !msk {
                        *w = 0.0;
                    }
                }
                // this step's gradients were masked by the old topology;
                // re-mask so the optimizer cannot touch pruned positions
                for (g, &msk) in grads.weights[li].as_mut_slice().iter_mut().zip(topo.mask()) {
                    if !msk {
                        *g = 0.0;
                    }
                }
                events.push(topo.update_record(t, li, outcome.ablated.len()));
            }
            momentum.remask(&model);
            update_count += 1;
            accum.clear();
            accum_count = 0;
            model.assert_mask_invariant();
        }

        sgd_step(&mut model, &grads, &mut momentum, config, t);
        model.assert_mask_invariant();

        let step_done = t + 1;
        if step_done % config.eval_every == 0 || step_done == config.total_steps {
            let (eval_loss, eval_acc) = evaluate(&model, data, config.kernel)?;
            metrics.push(MetricPoint {
                step: step_done,
                train_loss: loss,
                eval_loss,
                eval_accuracy: eval_acc,
            });
        }
    }

    let layers = layer_reports(&model);
    let flops = flops_summary(config, &model);
    let last = metrics.last().expect("at least one metric point");
    let report = RunReport {
        config: config.clone(),
        final_eval_loss: last.eval_loss,
        final_eval_accuracy: last.eval_accuracy,
        metrics,
        layers,
        topology_events: events,
        topology_update_count: update_count,
        flops,
    };
    Ok(TrainOutcome { report, model })
}

/// Mean loss and accuracy on the held-out set.
pub fn evaluate(
    model: &MlpModel,
    data: &dyn DataSource,
    kernel: ForwardKernel,
) -> Result<(f64, f64), TrainError> {
    let (x, y) = data.eval_set();
    let (logits, _) = forward(model, x, kernel)?;
    let (loss, _) = softmax_cross_entropy(&logits, y, 0.0);
    let mut correct = 0usize;
    for (c, &label) in y.iter().enumerate() {
        let mut best = 0;
        for i in 1..logits.rows() {
            if logits.at(i, c) > logits.at(best, c) {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / y.len() as f64))
}

fn layer_reports(model: &MlpModel) -> Vec<LayerReport> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(index, layer)| {
            let params = (layer.n_in() * layer.n_out()) as u64;
            match &layer.topology {
                Some(topo) => {
                    let stats = topo.ablation_stats();
                    LayerReport {
                        index,
                        neurons: layer.n_out(),
                        dense_in: layer.n_in(),
                        sparse: true,
                        params,
                        nnz: topo.nnz() as u64,
                        k_final: (topo.mode() == SparsityMode::ConstantFanIn)
                            .then(|| topo.fan_in()),
                        n_active: topo.n_active(),
                        active_fraction: stats.active_fraction,
                        fan_in_histogram: stats
                            .fan_in_histogram
                            .into_iter()
                            .collect(),
                    }
                }
                None => LayerReport {
                    index,
                    neurons: layer.n_out(),
                    dense_in: layer.n_in(),
                    sparse: false,
                    params,
                    nnz: params,
                    k_final: None,
                    n_active: layer.n_out(),
                    active_fraction: 1.0,
                    fan_in_histogram: vec![(layer.n_in(), layer.n_out())],
                },
            }
        })
        .collect()
}

fn flops_summary(config: &TrainConfig, model: &MlpModel) -> FlopsSummary {
    let last = model.layers.len() - 1;
    let arch = ArchitectureSpec {
        layers: model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let params = (layer.n_in() * layer.n_out()) as f64;
                let nnz = layer.topology.as_ref().map_or(params, |t| t.nnz() as f64);
                ArchLayer {
                    name: format!("layer{l}"),
                    kind: LayerKind::Linear {
                        n_in: layer.n_in(),
                        n_out: layer.n_out(),
                    },
                    activation: l < last,
                    sparsity: (1.0 - nnz / params).clamp(0.0, 1.0 - f64::EPSILON),
                }
            })
            .collect(),
    };
    let dense_arch = arch
        .with_sparsities(&vec![0.0; arch.layers.len()])
        .expect("same layer count");
    let inference_dense = flops::model_inference_flops(&dense_arch);
    let inference_final = flops::model_inference_flops(&arch);
    let training_total = if config.mode == TrainMode::Dense {
        3.0 * inference_dense * config.batch_size as f64 * config.total_steps as f64
    } else {
        let cost = TrainingCostModel::new(
            config.total_steps,
            config.batch_size as u64,
            config.update.delta_t,
        )
        .expect("validated config");
        flops::training_flops(&arch, &cost)
    };
    FlopsSummary {
        inference_dense,
        inference_final,
        training_total,
    }
}
