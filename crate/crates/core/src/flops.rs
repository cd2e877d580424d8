//! Inference and training FLOPs accounting over an architecture description.
//!
//! Counting convention: a multiply-accumulate is two FLOPs, an activation is
//! one FLOP per output element, and only convolutional and linear layers and
//! their activations are counted (adds, pooling, normalization and softmax
//! are ignored). Sparse layers scale their multiply-accumulate term by the
//! layer density `1 - s`.
//!
//! Training cost per example-step is
//!
//! ```text
//! (1 + backward_multiplier) * f_model + f_dense_grad / delta_t
//! ```
//!
//! with the backward pass counted as two forward passes and one dense
//! weight-gradient pass amortized over the `delta_t` steps between mask
//! updates. Totals multiply by batch size and step count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::LayerShape;

#[derive(Debug, Error)]
pub enum FlopsError {
    #[error("layer {layer}: sparsity {sparsity} outside [0, 1)")]
    SparsityOutOfRange { layer: String, sparsity: f64 },
    #[error("layer {layer}: dimensions must be positive")]
    ZeroDimension { layer: String },
    #[error("sparsity count {got} does not match layer count {expected}")]
    SparsityCountMismatch { expected: usize, got: usize },
    #[error("cost model: {0}")]
    InvalidCostModel(String),
    #[error("architecture parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Shape record of one counted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        n_in: usize,
        n_out: usize,
    },
    Conv {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        out_h: usize,
        out_w: usize,
    },
}

impl LayerKind {
    pub fn weight_count(&self) -> u64 {
        match *self {
            LayerKind::Linear { n_in, n_out } => (n_in * n_out) as u64,
            LayerKind::Conv {
                c_in, c_out, kh, kw, ..
            } => (c_in * c_out * kh * kw) as u64,
        }
    }

    /// Output positions each weight participates in.
    fn spatial(&self) -> u64 {
        match *self {
            LayerKind::Linear { .. } => 1,
            LayerKind::Conv { out_h, out_w, .. } => (out_h * out_w) as u64,
        }
    }

    fn activation_elements(&self) -> u64 {
        match *self {
            LayerKind::Linear { n_out, .. } => n_out as u64,
            LayerKind::Conv {
                c_out, out_h, out_w, ..
            } => (c_out * out_h * out_w) as u64,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv { .. } => "conv",
        }
    }

    fn dims_positive(&self) -> bool {
        match *self {
            LayerKind::Linear { n_in, n_out } => n_in > 0 && n_out > 0,
            LayerKind::Conv {
                c_in,
                c_out,
                kh,
                kw,
                out_h,
                out_w,
            } => c_in > 0 && c_out > 0 && kh > 0 && kw > 0 && out_h > 0 && out_w > 0,
        }
    }

    /// Parameter-shape view for the ERK allocator.
    pub fn as_layer_shape(&self) -> LayerShape {
        match *self {
            LayerKind::Linear { n_in, n_out } => LayerShape::Linear { n_in, n_out },
            LayerKind::Conv {
                c_in, c_out, kh, kw, ..
            } => LayerShape::Conv { c_in, c_out, kh, kw },
        }
    }
}

/// One layer record of an architecture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchLayer {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Whether an elementwise activation follows the layer.
    pub activation: bool,
    #[serde(default)]
    pub sparsity: f64,
}

/// Ordered sequence of layer records; the on-disk form is a JSON array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArchitectureSpec {
    pub layers: Vec<ArchLayer>,
}

impl ArchitectureSpec {
    pub fn from_json(json: &str) -> Result<Self, FlopsError> {
        let layers: Vec<ArchLayer> = serde_json::from_str(json)?;
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.layers).expect("architecture serializes")
    }

    pub fn validate(&self) -> Result<(), FlopsError> {
        for layer in &self.layers {
            if !layer.kind.dims_positive() {
                return Err(FlopsError::ZeroDimension {
                    layer: layer.name.clone(),
                });
            }
            if !(0.0..1.0).contains(&layer.sparsity) {
                return Err(FlopsError::SparsityOutOfRange {
                    layer: layer.name.clone(),
                    sparsity: layer.sparsity,
                });
            }
        }
        Ok(())
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.kind.weight_count()).sum()
    }

    /// Copy with per-layer sparsities replaced.
    pub fn with_sparsities(&self, sparsities: &[f64]) -> Result<Self, FlopsError> {
        if sparsities.len() != self.layers.len() {
            return Err(FlopsError::SparsityCountMismatch {
                expected: self.layers.len(),
                got: sparsities.len(),
            });
        }
        let mut spec = self.clone();
        for (layer, &s) in spec.layers.iter_mut().zip(sparsities) {
            layer.sparsity = s;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| l.kind.as_layer_shape()).collect()
    }
}

/// Forward FLOPs of one layer at the given sparsity.
pub fn layer_inference_flops(layer: &ArchLayer, sparsity: f64) -> f64 {
    let macs = (layer.kind.weight_count() * layer.kind.spatial()) as f64;
    let mut flops = 2.0 * macs * (1.0 - sparsity);
    if layer.activation {
        flops += layer.kind.activation_elements() as f64;
    }
    flops
}

/// Forward FLOPs of the whole model at its stored per-layer sparsities,
/// summed in layer order.
pub fn model_inference_flops(spec: &ArchitectureSpec) -> f64 {
    spec.layers
        .iter()
        .map(|l| layer_inference_flops(l, l.sparsity))
        .fold(0.0, |acc, f| acc + f)
}

/// One dense weight-gradient pass: the multiply-accumulate term at density
/// one, no activations.
pub fn dense_weight_grad_flops(spec: &ArchitectureSpec) -> f64 {
    spec.layers
        .iter()
        .map(|l| 2.0 * (l.kind.weight_count() * l.kind.spatial()) as f64)
        .fold(0.0, |acc, f| acc + f)
}

/// Per-step composition of the training cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingCostModel {
    pub steps: u64,
    pub batch: u64,
    /// Steps between mask updates; amortizes the dense-gradient surcharge.
    pub delta_t: u64,
    /// Backward-pass cost in units of forward passes.
    #[serde(default = "default_backward_multiplier")]
    pub backward_multiplier: f64,
}

fn default_backward_multiplier() -> f64 {
    2.0
}

impl TrainingCostModel {
    pub fn new(steps: u64, batch: u64, delta_t: u64) -> Result<Self, FlopsError> {
        if steps == 0 || batch == 0 || delta_t == 0 {
            return Err(FlopsError::InvalidCostModel(
                "steps, batch and delta_t must be >= 1".into(),
            ));
        }
        Ok(Self {
            steps,
            batch,
            delta_t,
            backward_multiplier: default_backward_multiplier(),
        })
    }
}

/// Total training FLOPs for the model at its stored sparsities.
pub fn training_flops(spec: &ArchitectureSpec, cost: &TrainingCostModel) -> f64 {
    let forward = model_inference_flops(spec);
    let surcharge = dense_weight_grad_flops(spec) / cost.delta_t as f64;
    let per_example_step = (1.0 + cost.backward_multiplier) * forward + surcharge;
    per_example_step * cost.batch as f64 * cost.steps as f64
}

/// One row of the CSV report.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReportRow {
    pub layer: String,
    pub kind: &'static str,
    pub params: u64,
    pub nnz: u64,
    pub flops: f64,
}

/// Per-layer report rows at the spec's stored sparsities.
pub fn report_rows(spec: &ArchitectureSpec) -> Vec<FlopsReportRow> {
    spec.layers
        .iter()
        .map(|l| {
            let params = l.kind.weight_count();
            FlopsReportRow {
                layer: l.name.clone(),
                kind: l.kind.type_name(),
                params,
                nnz: ((1.0 - l.sparsity) * params as f64).round() as u64,
                flops: layer_inference_flops(l, l.sparsity),
            }
        })
        .collect()
}
