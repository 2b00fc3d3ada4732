//! Network representation, file loading and exact concrete evaluation.
//!
//! A [`Network`] is an ordered list of [`Layer`]s. Convolutions are lowered to
//! explicit dense matrices at load time, so the bound engine only ever sees
//! `Dense`, `ReLU` and `MaxPool`. The accepted layer grammar is
//!
//! ```text
//! (Dense [ReLU [MaxPool]])* Dense
//! ```
//!
//! which the engine consumes as a list of [`Stage`]s: one dense layer followed
//! by an optional activation.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),
    #[error("max-pool layer at position {0} is not immediately preceded by a ReLU layer")]
    PoolWithoutRelu(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Affine layer `x = W·v + b` with `W` stored row-major (row `i` is output node `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Vec<Vec<f64>>, bias: Option<Vec<f64>>) -> Result<Self, ModelError> {
        let rows = weights.len();
        if rows == 0 {
            return Err(ModelError::ShapeMismatch("dense layer without rows".into()));
        }
        let cols = weights[0].len();
        if cols == 0 {
            return Err(ModelError::ShapeMismatch("dense layer without columns".into()));
        }
        if let Some(bad) = weights.iter().position(|r| r.len() != cols) {
            return Err(ModelError::ShapeMismatch(format!(
                "dense row {bad} has {} entries, expected {cols}",
                weights[bad].len()
            )));
        }
        let flat = weights.into_iter().flatten().collect();
        Self::from_flat(rows, cols, flat, bias)
    }

    pub fn from_flat(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if weights.len() != rows * cols {
            return Err(ModelError::ShapeMismatch(format!(
                "{} weights for a {rows}x{cols} layer",
                weights.len()
            )));
        }
        let bias = bias.unwrap_or_else(|| vec![0.0; rows]);
        if bias.len() != rows {
            return Err(ModelError::ShapeMismatch(format!(
                "bias has {} entries, expected {rows}",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(ModelError::MalformedDocument("non-finite weight or bias".into()));
        }
        Ok(Self { rows, cols, weights, bias })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.bias[i] + self.row(i).iter().zip(v).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Max-pooling with explicit index windows over the preceding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    pub groups: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Relu,
    MaxPool(MaxPool),
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "maxpool",
        }
    }
}

/// Activation applied after a stage's dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    /// ReLU followed by max-pooling; `pool` indexes into [`Network::layers`].
    ReluPool { pool: usize },
}

/// One dense layer plus its activation. `dense` indexes into [`Network::layers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub dense: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    /// Output shape of every layer, parallel to `layers`.
    shapes: Vec<Vec<usize>>,
    stages: Vec<Stage>,
}

impl Network {
    /// Builds a network over a flat input of `input_size` values.
    pub fn new(input_size: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        let shapes = flat_shapes(input_size, &layers)?;
        Self::with_shapes(vec![1, input_size], layers, shapes)
    }

    fn with_shapes(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        shapes: Vec<Vec<usize>>,
    ) -> Result<Self, ModelError> {
        let input_size: usize = input_shape.iter().product();
        if input_size == 0 {
            return Err(ModelError::ShapeMismatch("empty input".into()));
        }
        let stages = parse_stages(&layers)?;
        let mut width = input_size;
        for (pos, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if d.cols() != width {
                        return Err(ModelError::ShapeMismatch(format!(
                            "layer {pos} expects {} inputs but receives {width}",
                            d.cols()
                        )));
                    }
                    width = d.rows();
                }
                Layer::Relu => {}
                Layer::MaxPool(p) => {
                    if p.groups.is_empty() || p.groups.iter().any(|g| g.is_empty()) {
                        return Err(ModelError::ShapeMismatch(format!(
                            "max-pool layer {pos} has an empty window"
                        )));
                    }
                    if let Some(bad) = p.groups.iter().flatten().find(|&&i| i >= width) {
                        return Err(ModelError::ShapeMismatch(format!(
                            "max-pool layer {pos} references node {bad} of a {width}-node layer"
                        )));
                    }
                    width = p.groups.len();
                }
            }
            if shapes[pos].iter().product::<usize>() != width {
                return Err(ModelError::ShapeMismatch(format!(
                    "declared shape {:?} of layer {pos} does not hold {width} nodes",
                    shapes[pos]
                )));
            }
        }
        Ok(Self { layers, input_shape, shapes, stages })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_size(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Node counts of the dense layers (`s₁ … s_n`).
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| self.dense(s.dense).rows()).collect()
    }

    pub fn output_size(&self) -> usize {
        self.stage_dense(self.stages.len() - 1).rows()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage_dense(&self, stage: usize) -> &Dense {
        self.dense(self.stages[stage].dense)
    }

    pub fn stage_pool(&self, stage: usize) -> Option<&MaxPool> {
        match self.stages[stage].activation {
            Activation::ReluPool { pool } => match &self.layers[pool] {
                Layer::MaxPool(p) => Some(p),
                _ => unreachable!("stage table points at a non-pool layer"),
            },
            _ => None,
        }
    }

    /// Number of values a stage hands to the next stage.
    pub fn stage_output_size(&self, stage: usize) -> usize {
        match self.stage_pool(stage) {
            Some(p) => p.groups.len(),
            None => self.stage_dense(stage).rows(),
        }
    }

    /// Total number of ReLU nodes.
    pub fn relu_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.activation != Activation::Linear)
            .map(|s| self.dense(s.dense).rows())
            .sum()
    }

    pub fn has_pool(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::MaxPool(_)))
    }

    fn dense(&self, idx: usize) -> &Dense {
        match &self.layers[idx] {
            Layer::Dense(d) => d,
            _ => unreachable!("stage table points at a non-dense layer"),
        }
    }

    /// Exact forward pass.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.trace(x)?.output().to_vec())
    }

    /// Forward pass that records every stage's pre-activations and outputs.
    pub fn trace(&self, x: &[f64]) -> Result<Trace, ModelError> {
        if x.len() != self.input_size() {
            return Err(ModelError::DimensionMismatch { expected: self.input_size(), found: x.len() });
        }
        let mut pre = Vec::with_capacity(self.stages.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.stages.len());
        for k in 0..self.stages.len() {
            let input = if k == 0 { x } else { &post[k - 1] };
            let z = self.stage_dense(k).apply(input);
            let out = match self.stages[k].activation {
                Activation::Linear => z.clone(),
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::ReluPool { .. } => {
                    let pool = self.stage_pool(k).expect("pool stage");
                    pool.groups
                        .iter()
                        .map(|g| g.iter().map(|&i| z[i].max(0.0)).fold(f64::NEG_INFINITY, f64::max))
                        .collect()
                }
            };
            pre.push(z);
            post.push(out);
        }
        Ok(Trace { pre, post })
    }

    /// Canonical document form (convolutions already lowered).
    pub fn to_document(&self) -> NetworkDocument {
        let layers = self
            .layers
            .iter()
            .zip(&self.shapes)
            .map(|(layer, shape)| match layer {
                Layer::Dense(d) => LayerDocument::Dense {
                    weights: d.to_rows(),
                    bias: Some(d.bias().to_vec()),
                    shape: Some(shape.clone()),
                },
                Layer::Relu => LayerDocument::Relu,
                Layer::MaxPool(p) => {
                    LayerDocument::Maxpool { window: p.window, stride: p.stride }
                }
            })
            .collect();
        NetworkDocument {
            input_size: self.input_size(),
            input_shape: Some(self.input_shape.clone()),
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("network documents always serialize")
    }
}

/// Per-stage values recorded by [`Network::trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("networks have at least one stage")
    }
}

fn flat_shapes(input_size: usize, layers: &[Layer]) -> Result<Vec<Vec<usize>>, ModelError> {
    let mut width = input_size;
    let mut shapes = Vec::with_capacity(layers.len());
    for layer in layers {
        match layer {
            Layer::Dense(d) => width = d.rows(),
            Layer::Relu => {}
            Layer::MaxPool(p) => width = p.groups.len(),
        }
        shapes.push(vec![1, width]);
    }
    Ok(shapes)
}

fn parse_stages(layers: &[Layer]) -> Result<Vec<Stage>, ModelError> {
    let mut stages = Vec::new();
    let mut pos = 0;
    while pos < layers.len() {
        match &layers[pos] {
            Layer::Dense(_) => {
                let dense = pos;
                pos += 1;
                let mut activation = Activation::Linear;
                if matches!(layers.get(pos), Some(Layer::Relu)) {
                    activation = Activation::Relu;
                    pos += 1;
                    if matches!(layers.get(pos), Some(Layer::MaxPool(_))) {
                        activation = Activation::ReluPool { pool: pos };
                        pos += 1;
                    }
                }
                stages.push(Stage { dense, activation });
            }
            Layer::MaxPool(_) => return Err(ModelError::PoolWithoutRelu(pos)),
            Layer::Relu => {
                return Err(ModelError::UnsupportedLayer(format!(
                    "relu at position {pos} must follow a dense or conv layer"
                )))
            }
        }
    }
    match stages.last() {
        None => Err(ModelError::MalformedDocument("network has no layers".into())),
        Some(s) if s.activation != Activation::Linear => Err(ModelError::UnsupportedLayer(format!(
            "the final layer must be dense, found {}",
            layers.last().map_or("nothing", Layer::name)
        ))),
        Some(_) => Ok(stages),
    }
}

// ---------------------------------------------------------------------------
// Convolution lowering

/// A convolution over a `[channels, d₁, …, d_D]` tensor with the same window
/// and stride along every spatial axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub channels_out: usize,
    pub window: usize,
    pub stride: usize,
    /// Kernel, row-major over `[channels_out, channels_in, window, …, window]`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Output spatial extent of a sliding window.
pub fn window_positions(extent: usize, window: usize, stride: usize) -> Result<usize, ModelError> {
    if window == 0 || stride == 0 {
        return Err(ModelError::ShapeMismatch("window and stride must be positive".into()));
    }
    if window > extent {
        return Err(ModelError::ShapeMismatch(format!(
            "window {window} does not fit an axis of extent {extent}"
        )));
    }
    Ok((extent - window) / stride + 1)
}

/// Lowers a convolution to a dense layer acting on the flattened input.
/// Returns the layer and its output shape `[channels_out, o₁, …, o_D]`.
pub fn lower_conv_to_dense(
    conv: &ConvSpec,
    input_shape: &[usize],
) -> Result<(Dense, Vec<usize>), ModelError> {
    if input_shape.len() < 2 {
        return Err(ModelError::ShapeMismatch(format!(
            "convolution needs a [channels, spatial...] input, got {input_shape:?}"
        )));
    }
    if conv.channels_out == 0 {
        return Err(ModelError::ShapeMismatch("convolution without output channels".into()));
    }
    let channels_in = input_shape[0];
    let spatial = &input_shape[1..];
    let out_spatial = spatial
        .iter()
        .map(|&d| window_positions(d, conv.window, conv.stride))
        .collect::<Result<Vec<_>, _>>()?;
    let kernel: Vec<usize> = vec![conv.window; spatial.len()];
    let kernel_len: usize = kernel.iter().product();
    let expected = conv.channels_out * channels_in * kernel_len;
    if conv.weights.len() != expected {
        return Err(ModelError::ShapeMismatch(format!(
            "convolution has {} weights, expected {expected}",
            conv.weights.len()
        )));
    }
    let in_len: usize = input_shape.iter().product();
    let in_plane: usize = spatial.iter().product();
    let out_plane: usize = out_spatial.iter().product();
    let rows = conv.channels_out * out_plane;
    let mut weights = vec![0.0; rows * in_len];
    let mut bias = vec![0.0; rows];
    let conv_bias = conv.bias.clone().unwrap_or_else(|| vec![0.0; conv.channels_out]);
    if conv_bias.len() != conv.channels_out {
        return Err(ModelError::ShapeMismatch(format!(
            "convolution bias has {} entries, expected {}",
            conv_bias.len(),
            conv.channels_out
        )));
    }

    for co in 0..conv.channels_out {
        for (o_flat, o) in MultiIndex::new(&out_spatial).enumerate() {
            let row = co * out_plane + o_flat;
            bias[row] = conv_bias[co];
            for ci in 0..channels_in {
                for (k_flat, k) in MultiIndex::new(&kernel).enumerate() {
                    let pos: Vec<usize> =
                        o.iter().zip(&k).map(|(&o, &k)| o * conv.stride + k).collect();
                    let col = ci * in_plane + flatten(&pos, spatial);
                    let w = conv.weights[(co * channels_in + ci) * kernel_len + k_flat];
                    weights[row * in_len + col] += w;
                }
            }
        }
    }
    let mut shape = vec![conv.channels_out];
    shape.extend(out_spatial);
    Ok((Dense::from_flat(rows, in_len, weights, Some(bias))?, shape))
}

/// Builds max-pool index windows over a `[channels, spatial...]` layer.
pub fn pool_groups(
    input_shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<(Vec<Vec<usize>>, Vec<usize>), ModelError> {
    if input_shape.len() < 2 {
        return Err(ModelError::ShapeMismatch(format!(
            "max-pool needs a [channels, spatial...] input, got {input_shape:?}"
        )));
    }
    let spatial = &input_shape[1..];
    let out_spatial = spatial
        .iter()
        .map(|&d| window_positions(d, window, stride))
        .collect::<Result<Vec<_>, _>>()?;
    let kernel = vec![window; spatial.len()];
    let in_plane: usize = spatial.iter().product();
    let mut groups = Vec::new();
    for c in 0..input_shape[0] {
        for o in MultiIndex::new(&out_spatial) {
            let group = MultiIndex::new(&kernel)
                .map(|k| {
                    let pos: Vec<usize> = o.iter().zip(&k).map(|(&o, &k)| o * stride + k).collect();
                    c * in_plane + flatten(&pos, spatial)
                })
                .collect();
            groups.push(group);
        }
    }
    let mut shape = vec![input_shape[0]];
    shape.extend(out_spatial);
    Ok((groups, shape))
}

fn flatten(pos: &[usize], dims: &[usize]) -> usize {
    pos.iter().zip(dims).fold(0, |acc, (&p, &d)| acc * d + p)
}

/// Row-major odometer over `[0, d₁) × … × [0, d_D)`.
struct MultiIndex {
    dims: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl MultiIndex {
    fn new(dims: &[usize]) -> Self {
        let next = if dims.contains(&0) { None } else { Some(vec![0; dims.len()]) };
        Self { dims: dims.to_vec(), next }
    }
}

impl Iterator for MultiIndex {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut axis = succ.len();
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            succ[axis] += 1;
            if succ[axis] < self.dims[axis] {
                self.next = Some(succ);
                break;
            }
            succ[axis] = 0;
        }
        Some(current)
    }
}

// ---------------------------------------------------------------------------
// Documents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub input_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerDocument {
    Dense {
        weights: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        /// Logical `[channels, spatial...]` shape of the output; flat when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Vec<usize>>,
    },
    Relu,
    Conv {
        channels_out: usize,
        window: usize,
        stride: usize,
        weights: Nested,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
    },
    Maxpool {
        window: usize,
        stride: usize,
    },
}

/// Arbitrarily nested number arrays, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Nested {
    Scalar(f64),
    List(Vec<Nested>),
}

impl Nested {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        match self {
            Nested::Scalar(v) => out.push(*v),
            Nested::List(items) => items.iter().for_each(|i| i.flatten_into(out)),
        }
    }
}

const LAYER_TYPES: [&str; 4] = ["dense", "relu", "conv", "maxpool"];

/// Parses and validates a network file.
pub fn load_network(document: &str) -> Result<Network, ModelError> {
    let raw: Value =
        serde_json::from_str(document).map_err(|e| ModelError::MalformedDocument(e.to_string()))?;
    if let Some(layers) = raw.get("layers").and_then(Value::as_array) {
        for (pos, layer) in layers.iter().enumerate() {
            match layer.get("type").and_then(Value::as_str) {
                Some(t) if LAYER_TYPES.contains(&t) => {}
                Some(t) => return Err(ModelError::UnsupportedLayer(format!("`{t}` at position {pos}"))),
                None => {
                    return Err(ModelError::MalformedDocument(format!(
                        "layer {pos} has no \"type\" field"
                    )))
                }
            }
        }
    }
    let doc: NetworkDocument =
        serde_json::from_value(raw).map_err(|e| ModelError::MalformedDocument(e.to_string()))?;
    network_from_document(doc)
}

pub fn network_from_document(doc: NetworkDocument) -> Result<Network, ModelError> {
    let input_shape = doc.input_shape.unwrap_or_else(|| vec![1, doc.input_size]);
    if input_shape.iter().product::<usize>() != doc.input_size || input_shape.is_empty() {
        return Err(ModelError::ShapeMismatch(format!(
            "input_shape {input_shape:?} does not hold {} values",
            doc.input_size
        )));
    }
    let mut shape = input_shape.clone();
    let mut layers = Vec::with_capacity(doc.layers.len());
    let mut shapes = Vec::with_capacity(doc.layers.len());
    for (pos, layer) in doc.layers.into_iter().enumerate() {
        let width: usize = shape.iter().product();
        let (layer, next_shape) = match layer {
            LayerDocument::Dense { weights, bias, shape: declared } => {
                let dense = Dense::new(weights, bias)?;
                if dense.cols() != width {
                    return Err(ModelError::ShapeMismatch(format!(
                        "layer {pos} expects {} inputs but receives {width}",
                        dense.cols()
                    )));
                }
                let out = declared.unwrap_or_else(|| vec![1, dense.rows()]);
                (Layer::Dense(dense), out)
            }
            LayerDocument::Relu => (Layer::Relu, shape.clone()),
            LayerDocument::Conv { channels_out, window, stride, weights, bias } => {
                let spec = ConvSpec { channels_out, window, stride, weights: weights.flatten(), bias };
                let (dense, out) = lower_conv_to_dense(&spec, &shape)?;
                (Layer::Dense(dense), out)
            }
            LayerDocument::Maxpool { window, stride } => {
                let (groups, out) = pool_groups(&shape, window, stride)?;
                (Layer::MaxPool(MaxPool { window, stride, groups }), out)
            }
        };
        layers.push(layer);
        shapes.push(next_shape.clone());
        shape = next_shape;
    }
    Network::with_shapes(input_shape, layers, shapes)
}

// ---------------------------------------------------------------------------
// Input region and property

/// L∞ box around a reference input, optionally clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub center: Vec<f64>,
    pub epsilon: f64,
    pub clip: Option<(Vec<f64>, Vec<f64>)>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl InputBox {
    pub fn new(
        center: Vec<f64>,
        epsilon: f64,
        clip: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self, ModelError> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(ModelError::MalformedDocument(format!("epsilon must be a non-negative number, got {epsilon}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::MalformedDocument("non-finite center".into()));
        }
        let n = center.len();
        let mut lo: Vec<f64> = center.iter().map(|c| c - epsilon).collect();
        let mut hi: Vec<f64> = center.iter().map(|c| c + epsilon).collect();
        if let Some((clo, chi)) = &clip {
            for bound in [clo, chi] {
                if bound.len() != n {
                    return Err(ModelError::DimensionMismatch { expected: n, found: bound.len() });
                }
            }
            for i in 0..n {
                lo[i] = lo[i].max(clo[i]);
                hi[i] = hi[i].min(chi[i]);
            }
        }
        if let Some(i) = (0..n).find(|&i| !(lo[i] <= hi[i])) {
            return Err(ModelError::MalformedDocument(format!(
                "input dimension {i} is empty after clipping ([{}, {}])",
                lo[i], hi[i]
            )));
        }
        Ok(Self { center, epsilon, clip, lo, hi })
    }

    /// A box given directly by its corners.
    pub fn from_bounds(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ModelError> {
        if lo.len() != hi.len() {
            return Err(ModelError::DimensionMismatch { expected: lo.len(), found: hi.len() });
        }
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let epsilon = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (h - l)).fold(0.0, f64::max);
        Self::new(center, epsilon, Some((lo, hi)))
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, ModelError> {
        Self::new(self.center.clone(), epsilon, self.clip.clone())
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.lo.iter().zip(&self.hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
    }
}

/// Local robustness: the reference label must strictly win everywhere in the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Property {
    Robustness { true_label: usize },
}

impl Property {
    pub fn robustness(true_label: usize) -> Self {
        Property::Robustness { true_label }
    }

    pub fn true_label(&self) -> usize {
        match self {
            Property::Robustness { true_label } => *true_label,
        }
    }

    /// Adversarial output indices for a network with `outputs` logits.
    pub fn targets(&self, outputs: usize) -> Vec<usize> {
        (0..outputs).filter(|&j| j != self.true_label()).collect()
    }

    /// `max_{j≠t} out_j − out_t`; the property is violated iff this is `≥ 0`.
    pub fn margin(&self, outputs: &[f64]) -> f64 {
        let t = self.true_label();
        outputs
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != t)
            .map(|(_, v)| v - outputs[t])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_violated_by(&self, outputs: &[f64]) -> bool {
        self.margin(outputs) >= 0.0
    }

    pub fn check(&self, net: &Network) -> Result<(), ModelError> {
        let n = net.output_size();
        if self.true_label() >= n {
            return Err(ModelError::ShapeMismatch(format!(
                "label {} out of range for {n} outputs",
                self.true_label()
            )));
        }
        if n < 2 {
            return Err(ModelError::ShapeMismatch("robustness needs at least two outputs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDocument {
    pub center: Vec<f64>,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipDocument>,
    pub label: usize,
}

/// `[lo, hi]` applied to every dimension, or `[[lo…], [hi…]]` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClipDocument {
    Uniform([f64; 2]),
    PerDimension([Vec<f64>; 2]),
}

pub fn load_input_spec(document: &str) -> Result<(InputBox, Property), ModelError> {
    let doc: InputDocument =
        serde_json::from_str(document).map_err(|e| ModelError::MalformedDocument(e.to_string()))?;
    input_from_document(doc)
}

pub fn input_from_document(doc: InputDocument) -> Result<(InputBox, Property), ModelError> {
    let n = doc.center.len();
    let clip = doc.clip.map(|c| match c {
        ClipDocument::Uniform([lo, hi]) => (vec![lo; n], vec![hi; n]),
        ClipDocument::PerDimension([lo, hi]) => (lo, hi),
    });
    let input = InputBox::new(doc.center, doc.epsilon, clip)?;
    Ok((input, Property::robustness(doc.label)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(w: Vec<Vec<f64>>, b: Vec<f64>) -> Layer {
        Layer::Dense(Dense::new(w, Some(b)).unwrap())
    }

    #[test]
    fn identity_network_loads() {
        let net = load_network(r#"{"input_size":1,"layers":[{"type":"dense","weights":[[1]],"bias":[0]}]}"#)
            .unwrap();
        assert_eq!(net.input_size(), 1);
        assert_eq!(net.layer_sizes(), vec![1]);
        assert_eq!(net.evaluate(&[5.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn inconsistent_dense_shapes_are_rejected() {
        let doc = r#"{"input_size":3,"layers":[
            {"type":"dense","weights":[[1,2,3],[4,5,6]]},
            {"type":"dense","weights":[[1,2],[3,4]]},
            {"type":"dense","weights":[[1,2,3]]}]}"#;
        assert!(matches!(load_network(doc), Err(ModelError::ShapeMismatch(_))));
        // Dense(2×3) followed by Dense(2×2) is consistent; a 3-input second layer is not.
        let doc = r#"{"input_size":3,"layers":[
            {"type":"dense","weights":[[1,2,3],[4,5,6]]},
            {"type":"dense","weights":[[1,2,3],[3,4,5]]}]}"#;
        assert!(matches!(load_network(doc), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn document_errors() {
        assert!(matches!(load_network("{"), Err(ModelError::MalformedDocument(_))));
        let sigmoid = r#"{"input_size":1,"layers":[{"type":"dense","weights":[[1]]},{"type":"sigmoid"},{"type":"dense","weights":[[1]]}]}"#;
        assert!(matches!(load_network(sigmoid), Err(ModelError::UnsupportedLayer(_))));
        let pool = r#"{"input_size":4,"layers":[{"type":"dense","weights":[[1,0,0,0],[0,1,0,0]]},{"type":"maxpool","window":2,"stride":2},{"type":"dense","weights":[[1]]}]}"#;
        assert!(matches!(load_network(pool), Err(ModelError::PoolWithoutRelu(1))));
        let trailing_relu = r#"{"input_size":1,"layers":[{"type":"dense","weights":[[1]]},{"type":"relu"}]}"#;
        assert!(matches!(load_network(trailing_relu), Err(ModelError::UnsupportedLayer(_))));
    }

    #[test]
    fn bias_defaults_to_zero() {
        let net = load_network(r#"{"input_size":2,"layers":[{"type":"dense","weights":[[1,1]]}]}"#).unwrap();
        assert_eq!(net.evaluate(&[2.0, 3.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn ff2x24_topology() {
        let row = |n: usize| vec![0.01; n];
        let layers = vec![
            LayerDocument::Dense { weights: vec![row(784); 24], bias: None, shape: None },
            LayerDocument::Relu,
            LayerDocument::Dense { weights: vec![row(24); 24], bias: None, shape: None },
            LayerDocument::Relu,
            LayerDocument::Dense { weights: vec![row(24); 10], bias: None, shape: None },
        ];
        let doc = NetworkDocument { input_size: 784, input_shape: None, layers };
        let net = load_network(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert_eq!(net.layer_sizes(), vec![24, 24, 10]);
        assert_eq!(net.relu_count(), 48);
    }

    #[test]
    fn path_merging_example_evaluates_to_half() {
        let net = Network::new(
            1,
            vec![dense(vec![vec![1.0], vec![-0.5]], vec![0.0, 0.0]), dense(vec![vec![1.0, 1.0]], vec![0.0])],
        )
        .unwrap();
        assert_eq!(net.evaluate(&[1.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let net = Network::new(
            1,
            vec![dense(vec![vec![1.0]], vec![-1.0]), Layer::Relu, dense(vec![vec![1.0]], vec![0.0])],
        )
        .unwrap();
        assert_eq!(net.evaluate(&[0.5]).unwrap(), vec![0.0]);
        assert!(matches!(net.evaluate(&[0.5, 1.0]), Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn pointwise_conv_is_diagonal() {
        let conv = ConvSpec { channels_out: 1, window: 1, stride: 1, weights: vec![2.0], bias: None };
        let (d, shape) = lower_conv_to_dense(&conv, &[1, 3]).unwrap();
        assert_eq!(d.to_rows(), vec![vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]]);
        assert_eq!(shape, vec![1, 3]);
    }

    #[test]
    fn strided_conv_expands_by_hand() {
        let conv = ConvSpec { channels_out: 1, window: 2, stride: 2, weights: vec![1.0, 1.0], bias: None };
        let (d, _) = lower_conv_to_dense(&conv, &[1, 4]).unwrap();
        assert_eq!(d.to_rows(), vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]);
    }

    #[test]
    fn mnist_conv_output_extent() {
        // Count window placements directly.
        let brute = (0..28).filter(|s| s % 2 == 0 && s + 4 <= 28).count();
        assert_eq!(brute, 13);
        let conv = ConvSpec { channels_out: 1, window: 4, stride: 2, weights: vec![1.0; 16], bias: None };
        let (d, shape) = lower_conv_to_dense(&conv, &[1, 28, 28]).unwrap();
        assert_eq!(shape, vec![1, 13, 13]);
        assert_eq!(d.rows(), 169);
        let bad = ConvSpec { weights: vec![1.0; 3], ..conv };
        assert!(matches!(lower_conv_to_dense(&bad, &[1, 28, 28]), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn pool_groups_tile_the_plane() {
        let (groups, shape) = pool_groups(&[1, 4, 4], 2, 2).unwrap();
        assert_eq!(shape, vec![1, 2, 2]);
        assert_eq!(groups[0], vec![0, 1, 4, 5]);
        assert_eq!(groups[3], vec![10, 11, 14, 15]);
    }

    #[test]
    fn input_spec_boxes() {
        let (b, p) = load_input_spec(r#"{"center":[0,0],"epsilon":1,"label":1}"#).unwrap();
        assert_eq!(b.lo(), &[-1.0, -1.0]);
        assert_eq!(b.hi(), &[1.0, 1.0]);
        assert_eq!(p.true_label(), 1);
        let (b, _) = load_input_spec(r#"{"center":[0.5],"epsilon":1,"clip":[0,1],"label":0}"#).unwrap();
        assert_eq!(b.lo(), &[0.0]);
        assert_eq!(b.hi(), &[1.0]);
        assert!(matches!(load_input_spec(r#"{"center":[0.5]}"#), Err(ModelError::MalformedDocument(_))));
    }

    #[test]
    fn mnist_scale_box_is_clipped_to_pixel_range() {
        let center: Vec<f64> = (0..784).map(|i| (i % 256) as f64).collect();
        let b = InputBox::new(center, 10.0, Some((vec![0.0; 784], vec![255.0; 784]))).unwrap();
        assert_eq!((b.lo()[100], b.hi()[100]), (90.0, 110.0));
        assert_eq!((b.lo()[0], b.hi()[0]), (0.0, 10.0));
        assert_eq!((b.lo()[255], b.hi()[255]), (245.0, 255.0));
    }

    #[test]
    fn margin_counts_ties_as_violations() {
        let p = Property::robustness(0);
        assert!(p.is_violated_by(&[1.0, 1.0]));
        assert!(!p.is_violated_by(&[1.5, 1.0]));
        assert_eq!(p.targets(3), vec![1, 2]);
    }
}
