//! Feed-forward network engine: dense, conv2d (stride 1, valid padding),
//! 2x2 max-pool, ReLU and a softmax cross-entropy head, with exact
//! backpropagation and plain SGD.

mod layers;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

pub use layers::{forward, ForwardCache};
pub use train::{evaluate, loss_and_grad, local_train, sgd_step, Evaluation};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training shard is empty")]
    EmptyShard,
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        in_units: usize,
        out_units: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    MaxPool2x2,
    Relu,
    SoftmaxOutput,
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// Number of output units (dense) or filters (conv).
    pub fn units(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { out_units, .. } => Some(out_units),
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Whether the layer's output units (or filters) may be dropped from sub-models.
    pub prunable: bool,
}

impl LayerSpec {
    pub fn dense(in_units: usize, out_units: usize) -> Self {
        Self {
            kind: LayerKind::Dense { in_units, out_units },
            prunable: false,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            },
            prunable: false,
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            prunable: false,
        }
    }

    pub fn max_pool() -> Self {
        Self {
            kind: LayerKind::MaxPool2x2,
            prunable: false,
        }
    }

    pub fn softmax() -> Self {
        Self {
            kind: LayerKind::SoftmaxOutput,
            prunable: false,
        }
    }

    pub fn prunable(mut self) -> Self {
        self.prunable = true;
        self
    }
}

/// Validated layer stack together with the per-example input shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Per-example output shape of every layer.
    shapes: Vec<Vec<usize>>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self, ModelError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(ModelError::InvalidArchitecture(format!(
                "input shape {input_shape:?} must be non-empty with positive dims"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, spec) in layers.iter().enumerate() {
            let bad = |detail: String| ModelError::ShapeMismatch { layer: i, detail };
            cur = match spec.kind {
                LayerKind::Dense { in_units, out_units } => {
                    if in_units == 0 || out_units == 0 {
                        return Err(bad("dense dimensions must be positive".into()));
                    }
                    let flat: usize = cur.iter().product();
                    if flat != in_units {
                        return Err(bad(format!("dense expects {in_units} inputs, got shape {cur:?}")));
                    }
                    vec![out_units]
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                        return Err(bad("conv dimensions must be positive".into()));
                    }
                    match cur[..] {
                        [c, h, w] if c == in_channels && h >= kernel_h && w >= kernel_w => {
                            vec![out_channels, h - kernel_h + 1, w - kernel_w + 1]
                        }
                        _ => {
                            return Err(bad(format!(
                                "conv expects [{in_channels}, >={kernel_h}, >={kernel_w}], got {cur:?}"
                            )))
                        }
                    }
                }
                LayerKind::MaxPool2x2 => match cur[..] {
                    [c, h, w] if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
                    _ => return Err(bad(format!("max-pool expects [c, >=2, >=2], got {cur:?}"))),
                },
                LayerKind::Relu | LayerKind::SoftmaxOutput => cur,
            };
            if spec.prunable && !spec.kind.is_parameterized() {
                return Err(bad("only dense and conv layers can be prunable".into()));
            }
            if matches!(spec.kind, LayerKind::SoftmaxOutput) && i + 1 != layers.len() {
                return Err(bad("softmax output must be the final layer".into()));
            }
            shapes.push(cur.clone());
        }
        let params: Vec<usize> = (0..layers.len())
            .filter(|&i| layers[i].kind.is_parameterized())
            .collect();
        let Some(&last) = params.last() else {
            return Err(ModelError::InvalidArchitecture("no parameterized layer".into()));
        };
        if layers[last].prunable {
            return Err(ModelError::InvalidArchitecture(
                "the output layer cannot be prunable".into(),
            ));
        }
        if shapes.last().map(Vec::len) != Some(1) {
            return Err(ModelError::InvalidArchitecture(
                "network must end in a flat class vector".into(),
            ));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    /// Dense MLP `input -> hidden... -> classes` with ReLU between layers
    /// and every hidden layer prunable.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self, ModelError> {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h).prunable());
            layers.push(LayerSpec::relu());
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, classes));
        layers.push(LayerSpec::softmax());
        Self::new(vec![input], layers)
    }

    /// Small CNN on a `side x side` single-channel image:
    /// conv3x3 -> relu -> pool -> dense(hidden) -> relu -> dense(classes).
    pub fn cnn(side: usize, filters: usize, hidden: usize, classes: usize) -> Result<Self, ModelError> {
        if side < 4 {
            return Err(ModelError::InvalidArchitecture(format!(
                "cnn needs an image side of at least 4, got {side}"
            )));
        }
        let pooled = (side - 2) / 2;
        Self::new(
            vec![1, side, side],
            vec![
                LayerSpec::conv2d(1, filters, 3, 3).prunable(),
                LayerSpec::relu(),
                LayerSpec::max_pool(),
                LayerSpec::dense(filters * pooled * pooled, hidden).prunable(),
                LayerSpec::relu(),
                LayerSpec::dense(hidden, classes),
                LayerSpec::softmax(),
            ],
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-example output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-example input shape of layer `i`.
    pub fn input_shape_of(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    /// Arch-level indices of dense and conv layers, in order.
    pub fn param_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.is_parameterized())
    }

    pub fn prunable_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.layers.len()).filter(|&i| self.layers[i].prunable)
    }

    pub fn num_param_layers(&self) -> usize {
        self.param_layers().count()
    }

    /// Expected (weights, biases) shapes for every parameterized layer.
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.param_layers()
            .map(|i| match self.layers[i].kind {
                LayerKind::Dense { in_units, out_units } => (vec![out_units, in_units], vec![out_units]),
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => (
                    vec![out_channels, in_channels, kernel_h, kernel_w],
                    vec![out_channels],
                ),
                _ => unreachable!("param_layers yields dense/conv only"),
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T: Scalar = f64> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

/// Weights and biases of every parameterized layer, in architecture order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T: Scalar = f64> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform Glorot initialisation, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let layers = arch
            .param_shapes()
            .into_iter()
            .map(|(w, b)| {
                let (fan_in, fan_out) = match w[..] {
                    [o, i] => (i, o),
                    [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
                    _ => unreachable!(),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = w.iter().product();
                let values = (0..n).map(|_| T::of(rng.random_range(-limit..=limit))).collect();
                LayerParams {
                    weights: Tensor::new(w, values).expect("shape from arch"),
                    biases: Tensor::zeros(b),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .param_shapes()
                .into_iter()
                .map(|(w, b)| LayerParams {
                    weights: Tensor::zeros(w),
                    biases: Tensor::zeros(b),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: Tensor::zeros(l.weights.shape().to_vec()),
                    biases: Tensor::zeros(l.biases.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.same_shape(&b.weights) && a.biases.same_shape(&b.biases))
    }

    /// Checks the tensors against the shapes `arch` requires.
    pub fn check(&self, arch: &Architecture) -> Result<(), ModelError> {
        let expected = arch.param_shapes();
        if expected.len() != self.layers.len() {
            return Err(ModelError::InvalidArchitecture(format!(
                "architecture has {} parameterized layers, params have {}",
                expected.len(),
                self.layers.len()
            )));
        }
        for ((arch_idx, (w, b)), p) in arch.param_layers().zip(expected).zip(&self.layers) {
            if p.weights.shape() != w.as_slice() || p.biases.shape() != b.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    layer: arch_idx,
                    detail: format!(
                        "expected weights {w:?} / biases {b:?}, got {:?} / {:?}",
                        p.weights.shape(),
                        p.biases.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Flattened view of all tensors: weights then biases, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.biases])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.biases])
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self, ModelError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, ModelError> {
        if !self.same_shape(other) {
            return Err(ModelError::ShapeMismatch {
                layer: 0,
                detail: "parameter sets differ in shape".into(),
            });
        }
        let mut out = self.clone();
        for (o, t) in out.tensors_mut().zip(other.tensors()) {
            for (a, &b) in o.values_mut().iter_mut().zip(t.values()) {
                *a = f(*a, b);
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.cast(),
                    biases: l.biases.cast(),
                })
                .collect(),
        }
    }
}

/// Inputs `[batch, features...]` with one class label per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch<T: Scalar = f64> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(ModelError::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "{} labels for inputs of shape {:?}",
                    labels.len(),
                    inputs.shape()
                ),
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

    pub fn example_size(&self) -> usize {
        self.inputs.len() / self.labels.len().max(1)
    }

    /// Gathers the listed examples, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let f = self.example_size();
        let mut values = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            values.extend_from_slice(&self.inputs.values()[i * f..(i + 1) * f]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        Self {
            inputs: Tensor::new(shape, values).expect("gathered shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates batches with identical per-example shape.
    pub fn concat(parts: &[&Batch<T>]) -> Result<Self, ModelError> {
        let first = parts.first().ok_or(ModelError::EmptyBatch)?;
        let mut shape = first.inputs.shape().to_vec();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.inputs.shape()[1..] != shape[1..] {
                return Err(ModelError::ShapeMismatch {
                    layer: 0,
                    detail: "cannot concatenate batches of different example shape".into(),
                });
            }
            values.extend_from_slice(p.inputs.values());
            labels.extend_from_slice(&p.labels);
        }
        shape[0] = labels.len();
        Self::new(Tensor::new(shape, values)?, labels)
    }
}
