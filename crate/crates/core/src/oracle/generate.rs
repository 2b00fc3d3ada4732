//! Seeded random networks and verification instances.

use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{
    lower_conv_to_dense, pool_groups, ConvSpec, Dense, InputBox, Layer, MaxPool, ModelError, Network, Property,
};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    pub inputs: RangeInclusive<usize>,
    pub hidden: RangeInclusive<usize>,
    pub outputs: RangeInclusive<usize>,
    /// Number of dense layers, output layer included.
    pub depth: RangeInclusive<usize>,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self { inputs: 2..=16, hidden: 2..=16, outputs: 2..=4, depth: 2..=4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub net: Network,
    pub input: InputBox,
    pub prop: Property,
}

fn random_dense(rng: &mut impl Rng, rows: usize, cols: usize) -> Dense {
    let weights = (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    let bias = (0..rows).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Dense::new(weights, Some(bias)).expect("well-formed random layer")
}

/// Fully connected ReLU network with N(0, 1) weights and U[−1, 1] biases.
pub fn random_network(rng: &mut impl Rng, shape: &NetworkShape) -> Network {
    let inputs = rng.random_range(shape.inputs.clone());
    let depth = rng.random_range(shape.depth.clone());
    let mut layers = Vec::new();
    let mut width = inputs;
    for _ in 1..depth {
        let rows = rng.random_range(shape.hidden.clone());
        layers.push(Layer::Dense(random_dense(rng, rows, width)));
        layers.push(Layer::Relu);
        width = rows;
    }
    let outputs = rng.random_range(shape.outputs.clone());
    layers.push(Layer::Dense(random_dense(rng, outputs, width)));
    Network::new(inputs, layers).expect("consistent random shapes")
}

/// Index of the largest output at `x`, lowest index on ties.
pub fn predicted_label(net: &Network, x: &[f64]) -> Result<usize, ModelError> {
    let out = net.evaluate(x)?;
    Ok((0..out.len()).fold(0, |best, j| if out[j] > out[best] { j } else { best }))
}

/// A random network with a uniform center in `[−1, 1]ⁿ`, radius `epsilon`,
/// and the label predicted at the center.
pub fn random_instance(rng: &mut impl Rng, shape: &NetworkShape, epsilon: f64) -> Instance {
    let net = random_network(rng, shape);
    let center: Vec<f64> = (0..net.input_size()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let label = predicted_label(&net, &center).expect("center matches the input size");
    let input = InputBox::new(center, epsilon, None).expect("finite center and radius");
    Instance { net, input, prop: Property::robustness(label) }
}

/// Convolution, ReLU, 2×2 max-pool and a dense output over a small
/// single-channel image.
pub fn random_conv_network(rng: &mut impl Rng) -> Network {
    let side = rng.random_range(4..=6);
    let channels_in = rng.random_range(1..=2);
    let channels_out = rng.random_range(1..=3);
    let window = 2;
    let kernel_len = channels_out * channels_in * window * window;
    let conv = ConvSpec {
        channels_out,
        window,
        stride: 1,
        weights: (0..kernel_len).map(|_| StandardNormal.sample(&mut *rng)).collect(),
        bias: Some((0..channels_out).map(|_| rng.random_range(-1.0..=1.0)).collect()),
    };
    let input_shape = [channels_in, side, side];
    let (dense, conv_shape) = lower_conv_to_dense(&conv, &input_shape).expect("window fits the image");
    let (groups, pooled_shape) = pool_groups(&conv_shape, 2, 2).expect("pool fits the feature map");
    let pooled: usize = pooled_shape.iter().product();
    let outputs = rng.random_range(2..=4);
    let layers = vec![
        Layer::Dense(dense),
        Layer::Relu,
        Layer::MaxPool(MaxPool { window: 2, stride: 2, groups }),
        Layer::Dense(random_dense(rng, outputs, pooled)),
    ];
    Network::new(input_shape.iter().product(), layers).expect("consistent conv shapes")
}

pub fn random_conv_instance(rng: &mut impl Rng, epsilon: f64) -> Instance {
    let net = random_conv_network(rng);
    let center: Vec<f64> = (0..net.input_size()).map(|_| rng.random_range(0.0..=1.0)).collect();
    let label = predicted_label(&net, &center).expect("center matches the input size");
    let input = InputBox::new(center, epsilon, None).expect("finite center and radius");
    Instance { net, input, prop: Property::robustness(label) }
}
