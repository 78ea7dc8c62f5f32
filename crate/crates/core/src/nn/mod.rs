//! Small dense/convolutional networks with analytic backpropagation.
//!
//! Models are described by a [`ModelSpec`] (a fixed menu of layers) and their
//! trainable state lives in a [`ParamSet`]: one weight and one bias tensor per
//! parameterized layer, in layer order. Gradients use the same layout.

mod backprop;
mod kernels;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{numel, Tensor, TensorError};

pub use backprop::{
    backward, forward_loss, full_gradients, input_gradient, mixed_input_gradient,
    soft_target_gradients, Gradients,
};
pub(crate) use backprop::one_hot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layers {prev} -> {next} do not compose: {detail}")]
    Composition {
        prev: String,
        next: String,
        detail: String,
    },
    #[error("model has no parameterized layer")]
    NoParameters,
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("batch has {inputs} inputs but {labels} labels")]
    BatchSize { inputs: usize, labels: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One entry of the fixed layer menu. Convolutions are stride 1 without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    Activation {
        function: Activation,
    },
    Flatten,
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            Layer::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(format!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => match *input {
                [c, h, w] if c == in_channels && h >= kernel && w >= kernel && kernel > 0 => {
                    Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => Err(format!(
                    "conv2d expects [{in_channels}, >={kernel}, >={kernel}], got {input:?}"
                )),
            },
            Layer::MaxPool2 => match *input {
                [c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(format!("maxpool expects [c, >=2, >=2], got {input:?}")),
            },
            Layer::Activation { .. } => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![numel(input)]),
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    /// Glorot fan-in and fan-out.
    fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Dense { inputs, outputs } => Some((inputs, outputs)),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            _ => None,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { inputs, outputs } => write!(f, "dense({inputs}->{outputs})"),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => write!(f, "conv2d({in_channels}->{out_channels}, k{kernel})"),
            Layer::MaxPool2 => write!(f, "maxpool(2)"),
            Layer::Activation { function } => write!(f, "{function:?}").map(|_| ()),
            Layer::Flatten => write!(f, "flatten"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawModelSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    classes: usize,
}

/// A validated layer stack: each layer's output shape is the next layer's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    classes: usize,
    /// `shapes[i]` is the per-sample input of layer `i`; the last entry is the logits shape.
    shapes: Vec<Vec<usize>>,
    /// Index of the weight tensor in the ParamSet for each parameterized layer.
    slots: Vec<Option<usize>>,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = NnError;

    fn try_from(raw: RawModelSpec) -> Result<Self, NnError> {
        ModelSpec::new(raw.input_shape, raw.layers, raw.classes)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(spec: ModelSpec) -> Self {
        RawModelSpec {
            input_shape: spec.input_shape,
            layers: spec.layers,
            classes: spec.classes,
        }
    }
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, classes: usize) -> Result<Self, NnError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::Composition {
                prev: "input".into(),
                next: layers.first().map_or("output".into(), |l| l.to_string()),
                detail: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut shapes = vec![input_shape.clone()];
        let mut slots = Vec::with_capacity(layers.len());
        let mut next_slot = 0;
        for (i, layer) in layers.iter().enumerate() {
            let prev = if i == 0 {
                "input".to_string()
            } else {
                format!("layer {} {}", i - 1, layers[i - 1])
            };
            let out = layer
                .output_shape(&shapes[i])
                .map_err(|detail| NnError::Composition {
                    prev,
                    next: format!("layer {i} {layer}"),
                    detail,
                })?;
            shapes.push(out);
            if layer.is_parameterized() {
                slots.push(Some(next_slot));
                next_slot += 2;
            } else {
                slots.push(None);
            }
        }
        if next_slot == 0 {
            return Err(NnError::NoParameters);
        }
        let last = shapes.last().expect("non-empty");
        if *last != [classes] {
            return Err(NnError::Composition {
                prev: format!("layer {} {}", layers.len() - 1, layers[layers.len() - 1]),
                next: "output".into(),
                detail: format!("expected logits [{classes}], got {last:?}"),
            });
        }
        Ok(Self {
            input_shape,
            layers,
            classes,
            shapes,
            slots,
        })
    }

    /// dense(64->32)-relu-dense(32->10) on flattened 8x8 inputs.
    pub fn mlp_tiny() -> Self {
        Self::mlp(64, &[32], 10)
    }

    /// Fully connected stack with ReLU between hidden layers.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(Layer::Activation {
                function: Activation::Relu,
            });
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            outputs: classes,
        });
        Self::new(vec![inputs], layers, classes).expect("mlp composes by construction")
    }

    /// LeNet-5 shaped network:
    /// conv(c->6,k5)-relu-pool-conv(6->16,k5)-relu-pool-flatten-dense(120)-relu-dense(84)-relu-dense(classes).
    pub fn lenet_small(input_shape: [usize; 3], classes: usize) -> Result<Self, NnError> {
        let [c, h, w] = input_shape;
        let side = |s: usize| s.checked_sub(4).map(|s| s / 2).and_then(|s| s.checked_sub(4)).map(|s| s / 2);
        let (Some(fh), Some(fw)) = (side(h), side(w)) else {
            return Err(NnError::Composition {
                prev: "input".into(),
                next: "lenet".into(),
                detail: format!("input {input_shape:?} too small"),
            });
        };
        let relu = Layer::Activation {
            function: Activation::Relu,
        };
        let layers = vec![
            Layer::Conv2d {
                in_channels: c,
                out_channels: 6,
                kernel: 5,
            },
            relu,
            Layer::MaxPool2,
            Layer::Conv2d {
                in_channels: 6,
                out_channels: 16,
                kernel: 5,
            },
            relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense {
                inputs: 16 * fh * fw,
                outputs: 120,
            },
            relu,
            Layer::Dense {
                inputs: 120,
                outputs: 84,
            },
            relu,
            Layer::Dense {
                inputs: 84,
                outputs: classes,
            },
        ];
        Self::new(input_shape.to_vec(), layers, classes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        numel(&self.input_shape)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of parameterized layers.
    pub fn param_layers(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::param_shapes)
            .map(|(w, b)| numel(&w) + numel(&b))
            .sum()
    }

    pub(crate) fn layer_input_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub(crate) fn slot(&self, layer: usize) -> Option<usize> {
        self.slots[layer]
    }

    /// Expected `(layer_index, role, shape)` of every parameter tensor.
    pub fn param_layout(&self) -> Vec<(usize, Role, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes() {
                out.push((i, Role::Weight, w));
                out.push((i, Role::Bias, b));
            }
        }
        out
    }

    /// Errors unless `params` has exactly this model's tensor layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), NnError> {
        let layout = self.param_layout();
        if layout.len() != params.len() {
            return Err(NnError::Layout(format!(
                "model has {} parameter tensors, set has {}",
                layout.len(),
                params.len()
            )));
        }
        for ((layer, role, shape), entry) in layout.iter().zip(params.iter()) {
            if entry.layer_index != *layer || entry.role != *role || entry.tensor.shape() != shape.as_slice() {
                return Err(NnError::Layout(format!(
                    "expected layer {layer} {role} {shape:?}, found layer {} {} {:?}",
                    entry.layer_index,
                    entry.role,
                    entry.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights and zero biases, deterministic per seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let (Some((wshape, bshape)), Some((fan_in, fan_out))) = (layer.param_shapes(), layer.fans()) else {
            continue;
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..numel(&wshape))
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        entries.push(ParamEntry {
            layer_index: i,
            role: Role::Weight,
            tensor: Tensor::new(wshape, data).expect("shape from layer"),
        });
        entries.push(ParamEntry {
            layer_index: i,
            role: Role::Bias,
            tensor: Tensor::zeros(bshape),
        });
    }
    ParamSet { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
}

impl Role {
    pub fn wire_id(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
        }
    }

    pub fn from_wire_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Role::Weight),
            1 => Some(Role::Bias),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer_index: usize,
    pub role: Role,
    pub tensor: Tensor,
}

/// Ordered collection of named tensors mirroring a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

/// Gradients and model updates share the parameter layout.
pub type GradSet = ParamSet;

impl ParamSet {
    pub fn new(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape().to_vec()))
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    layer_index: e.layer_index,
                    role: e.role,
                    tensor: f(&e.tensor),
                })
                .collect(),
        }
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<(), NnError> {
        if self.len() != other.len() {
            return Err(NnError::Layout(format!(
                "{} tensors vs {} tensors",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.iter().zip(other.iter()) {
            if a.layer_index != b.layer_index || a.role != b.role || a.tensor.shape() != b.tensor.shape() {
                return Err(NnError::Layout(format!(
                    "layer {} {} {:?} vs layer {} {} {:?}",
                    a.layer_index,
                    a.role,
                    a.tensor.shape(),
                    b.layer_index,
                    b.role,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f32) -> Result<(), NnError> {
        self.check_layout(other)?;
        for (a, b) in self.entries.iter_mut().zip(other.iter()) {
            for (x, y) in a.tensor.data_mut().iter_mut().zip(b.tensor.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// Element-wise `self - other`.
    pub fn difference(&self, other: &ParamSet) -> Result<ParamSet, NnError> {
        self.check_layout(other)?;
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn scaled(&self, alpha: f32) -> ParamSet {
        self.map(|t| t.map(|v| v * alpha))
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries.iter().map(|e| e.tensor.sum_squares()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// All values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f32> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }
}

/// `W - mu * G` for every tensor.
pub fn sgd_step(params: &ParamSet, grads: &GradSet, mu: f32) -> Result<ParamSet, NnError> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(NnError::LearningRate(mu));
    }
    let mut out = params.clone();
    out.add_scaled(grads, -mu)?;
    Ok(out)
}

/// Inputs with a leading batch dimension plus one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self, NnError> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if inputs.shape().len() < 2 || n != labels.len() {
            return Err(NnError::BatchSize {
                inputs: n,
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.inputs.len() / self.labels.len().max(1)
    }

    /// Sub-batch built from the given sample indices, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            inputs: Tensor::new(shape, data).expect("selected rows"),
            labels,
        }
    }

    pub(crate) fn check(&self, spec: &ModelSpec) -> Result<(), NnError> {
        if self.inputs.shape()[1..] != *spec.input_shape() {
            return Err(NnError::InputShape {
                expected: spec.input_shape().to_vec(),
                got: self.inputs.shape()[1..].to_vec(),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= spec.classes()) {
            return Err(NnError::Label {
                label,
                classes: spec.classes(),
            });
        }
        Ok(())
    }
}
