//! Deterministic feed-forward network: convolutional, max-pool,
//! locally-connected (no weight sharing), and fully-connected layers, trained
//! by SGD on softmax cross-entropy.
//!
//! Layer indexing follows the architecture stack, e.g. for the default
//! desk-scale config: 0=C1 conv, 1=M2 pool, 2=C3 conv, 3..=5 locally
//! connected, 6=F7 (the bottleneck), 7=F8 (the classification layer).
//! Activation tensors are `[batch, channels, height, width]`; fully-connected
//! outputs use spatial dims 1x1.

mod layers;
mod train;

pub use train::{train, TrainConfig, TrainLog};

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::scalar::{s64, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    MaxPool,
    LocallyConnected,
    FullyConnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Kernel (height, width); ignored for FullyConnected.
    pub kernel: (usize, usize),
    pub channels_out: usize,
    pub stride: usize,
    pub has_relu: bool,
}

impl LayerSpec {
    pub fn conv(kernel: (usize, usize), channels_out: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel,
            channels_out,
            stride,
            has_relu: true,
        }
    }

    pub fn max_pool(kernel: (usize, usize), stride: usize, channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool,
            kernel,
            channels_out: channels,
            stride,
            has_relu: false,
        }
    }

    pub fn locally_connected(kernel: (usize, usize), channels_out: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::LocallyConnected,
            kernel,
            channels_out,
            stride,
            has_relu: true,
        }
    }

    pub fn fully_connected(channels_out: usize, has_relu: bool) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected,
            kernel: (1, 1),
            channels_out,
            stride: 1,
            has_relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input (height, width, channels).
    pub input_dims: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Width of the representation layer F7 (second to last).
    pub bottleneck_dim: usize,
    /// Width of the classification layer F8 (last).
    pub num_classes: usize,
}

/// Resolved geometry of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerShape {
    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
}

impl NetworkConfig {
    /// The default desk-scale stack for 32x32 grayscale inputs: conv 5x5x8,
    /// 2x2 max-pool, conv 3x3x16, three 3x3 locally-connected layers, then
    /// the bottleneck and classification layers.
    pub fn desk_default(bottleneck_dim: usize, num_classes: usize) -> Self {
        Self::desk_with_filters(16, bottleneck_dim, num_classes)
    }

    /// Desk-scale stack with a configurable locally-connected filter count.
    pub fn desk_with_filters(
        lc_filters: usize,
        bottleneck_dim: usize,
        num_classes: usize,
    ) -> Self {
        NetworkConfig {
            input_dims: (32, 32, 1),
            layers: vec![
                LayerSpec::conv((5, 5), 8, 1),
                LayerSpec::max_pool((2, 2), 2, 8),
                LayerSpec::conv((3, 3), 16, 1),
                LayerSpec::locally_connected((3, 3), lc_filters, 1),
                LayerSpec::locally_connected((3, 3), lc_filters, 1),
                LayerSpec::locally_connected((3, 3), lc_filters, 1),
                LayerSpec::fully_connected(bottleneck_dim, true),
                LayerSpec::fully_connected(num_classes, false),
            ],
            bottleneck_dim,
            num_classes,
        }
    }

    /// Index of the representation layer F7.
    pub fn f7_index(&self) -> usize {
        self.layers.len() - 2
    }

    /// Index of the classification layer F8.
    pub fn f8_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Validate the stack and resolve per-layer geometry.
    pub fn validate(&self) -> Result<Vec<LayerShape>> {
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::Config("network needs at least two layers".into()));
        }
        let (in_h, in_w, in_c) = self.input_dims;
        if in_h == 0 || in_w == 0 || in_c == 0 {
            return Err(Error::Config(format!(
                "input dims must be positive, got {:?}",
                self.input_dims
            )));
        }

        let f7 = &self.layers[n - 2];
        let f8 = &self.layers[n - 1];
        if f7.kind != LayerKind::FullyConnected || f8.kind != LayerKind::FullyConnected {
            return Err(Error::Config(
                "the last two layers must be fully connected".into(),
            ));
        }
        if !f7.has_relu {
            return Err(Error::Config("F7 must have ReLU".into()));
        }
        if f8.has_relu {
            return Err(Error::Config("F8 must not have ReLU".into()));
        }
        if f7.channels_out != self.bottleneck_dim {
            return Err(Error::Config(format!(
                "bottleneck_dim {} does not match F7 width {}",
                self.bottleneck_dim, f7.channels_out
            )));
        }
        if f8.channels_out != self.num_classes {
            return Err(Error::Config(format!(
                "num_classes {} does not match F8 width {}",
                self.num_classes, f8.channels_out
            )));
        }

        let mut shapes = Vec::with_capacity(n);
        let (mut c, mut h, mut w) = (in_c, in_h, in_w);
        let mut seen_fc = false;
        for (i, spec) in self.layers.iter().enumerate() {
            if spec.channels_out == 0 {
                return Err(Error::Config(format!("layer {i}: channels_out must be positive")));
            }
            if spec.stride == 0 {
                return Err(Error::Config(format!("layer {i}: stride must be positive")));
            }
            let shape = match spec.kind {
                LayerKind::FullyConnected => {
                    seen_fc = true;
                    LayerShape {
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        out_c: spec.channels_out,
                        out_h: 1,
                        out_w: 1,
                    }
                }
                kind => {
                    if seen_fc {
                        return Err(Error::Config(format!(
                            "layer {i}: {kind:?} cannot follow a fully-connected layer"
                        )));
                    }
                    let (kh, kw) = spec.kernel;
                    if kh == 0 || kw == 0 {
                        return Err(Error::Config(format!("layer {i}: kernel must be positive")));
                    }
                    if kh > h || kw > w {
                        return Err(Error::Config(format!(
                            "layer {i} ({kind:?}): kernel {kh}x{kw} exceeds input {h}x{w}"
                        )));
                    }
                    if kind == LayerKind::MaxPool && spec.channels_out != c {
                        return Err(Error::Config(format!(
                            "layer {i} (MaxPool): channels_out {} must equal input channels {c}",
                            spec.channels_out
                        )));
                    }
                    let out_h = (h - kh) / spec.stride + 1;
                    let out_w = (w - kw) / spec.stride + 1;
                    LayerShape {
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        out_c: spec.channels_out,
                        out_h,
                        out_w,
                    }
                }
            };
            c = shape.out_c;
            h = shape.out_h;
            w = shape.out_w;
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

/// Weights and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

/// A network: configuration, resolved shapes, learned parameters, and the set
/// of layer indices excluded from updates.
#[derive(Debug, Clone)]
pub struct Network<S> {
    config: NetworkConfig,
    shapes: Vec<LayerShape>,
    params: Vec<Option<LayerParams<S>>>,
    frozen: BTreeSet<usize>,
    rng_seed: u64,
}

impl<S: Scalar> Network<S> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn params(&self) -> &[Option<LayerParams<S>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<S>>] {
        &mut self.params
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams<S>> {
        self.params[layer].as_ref()
    }

    pub fn frozen(&self) -> &BTreeSet<usize> {
        &self.frozen
    }

    pub fn freeze(&mut self, layer: usize) {
        self.frozen.insert(layer);
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Rebuild from parts, revalidating the config. Used by checkpoint load.
    pub fn from_parts(
        config: NetworkConfig,
        params: Vec<Option<LayerParams<S>>>,
        frozen: BTreeSet<usize>,
        rng_seed: u64,
    ) -> Result<Self> {
        let shapes = config.validate()?;
        let net = Network {
            config,
            shapes,
            params,
            frozen,
            rng_seed,
        };
        net.check_param_shapes()?;
        Ok(net)
    }

    fn check_param_shapes(&self) -> Result<()> {
        for (i, spec) in self.config.layers.iter().enumerate() {
            let expected = param_shapes(spec, &self.shapes[i]);
            match (&self.params[i], expected) {
                (None, None) => {}
                (Some(p), Some((ws, bs))) => {
                    if p.weights.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::Shape(format!(
                            "layer {i}: parameter shapes {:?}/{:?} do not match config ({ws:?}/{bs:?})",
                            p.weights.shape(),
                            p.bias.shape()
                        )));
                    }
                }
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {i}: parameter presence does not match layer kind"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Total number of learned scalars.
    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    pub fn f7_index(&self) -> usize {
        self.config.f7_index()
    }

    /// Cast all parameters into another scalar type (exact for f32 -> f64).
    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            config: self.config.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|lp| LayerParams {
                        weights: lp.weights.cast(),
                        bias: lp.bias.cast(),
                    })
                })
                .collect(),
            frozen: self.frozen.clone(),
            rng_seed: self.rng_seed,
        }
    }
}

/// Weight/bias tensor shapes for a layer, `None` for parameterless kinds.
pub fn param_shapes(spec: &LayerSpec, shape: &LayerShape) -> Option<(Vec<usize>, Vec<usize>)> {
    let (kh, kw) = spec.kernel;
    match spec.kind {
        LayerKind::Conv => Some((
            vec![shape.out_c, shape.in_c, kh, kw],
            vec![shape.out_c],
        )),
        LayerKind::MaxPool => None,
        LayerKind::LocallyConnected => Some((
            vec![shape.out_h, shape.out_w, shape.out_c, shape.in_c, kh, kw],
            vec![shape.out_h, shape.out_w, shape.out_c],
        )),
        LayerKind::FullyConnected => Some((
            vec![shape.out_c, shape.in_len()],
            vec![shape.out_c],
        )),
    }
}

fn fan_in(spec: &LayerSpec, shape: &LayerShape) -> usize {
    match spec.kind {
        LayerKind::Conv | LayerKind::LocallyConnected => shape.in_c * spec.kernel.0 * spec.kernel.1,
        LayerKind::FullyConnected => shape.in_len(),
        LayerKind::MaxPool => 0,
    }
}

/// Build a network with Gaussian weights (std `1/sqrt(fan_in)`) and zero
/// biases. Deterministic given `(config, rng_seed)`.
pub fn build_network<S: Scalar>(config: &NetworkConfig, rng_seed: u64) -> Result<Network<S>> {
    let shapes = config.validate()?;
    let mut params = Vec::with_capacity(config.layers.len());
    for (i, spec) in config.layers.iter().enumerate() {
        match param_shapes(spec, &shapes[i]) {
            None => params.push(None),
            Some((w_shape, b_shape)) => {
                let std = 1.0 / (fan_in(spec, &shapes[i]) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let mut rng = stream_rng(rng_seed, STREAM_INIT, i as u64);
                let weights = Tensor::from_fn(&w_shape, |_| s64::<S>(normal.sample(&mut rng)));
                let bias = Tensor::zeros(&b_shape);
                params.push(Some(LayerParams { weights, bias }));
            }
        }
    }
    Ok(Network {
        config: config.clone(),
        shapes,
        params,
        frozen: BTreeSet::new(),
        rng_seed,
    })
}

/// All layer activations from one forward pass. `activations[0]` is the input
/// batch; `activations[i + 1]` is the (post-ReLU) output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    pub activations: Vec<Tensor<S>>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn batch_size(&self) -> usize {
        self.activations[0].shape()[0]
    }

    /// Final-layer output (the F8 logits), shape `[batch, num_classes, 1, 1]`.
    pub fn logits(&self) -> &Tensor<S> {
        self.activations.last().expect("nonempty pass")
    }

    /// One sample's logit row.
    pub fn logit_row(&self, sample: usize) -> &[S] {
        let t = self.logits();
        let k = t.len() / self.batch_size();
        &t.data()[sample * k..(sample + 1) * k]
    }

    /// One sample's activation slice at `layer_output` (0 = input).
    pub fn activation_row(&self, layer_output: usize, sample: usize) -> &[S] {
        let t = &self.activations[layer_output];
        let k = t.len() / self.batch_size();
        &t.data()[sample * k..(sample + 1) * k]
    }
}

/// Run the network on a batch `[batch, channels, height, width]`.
pub fn forward<S: Scalar>(net: &Network<S>, batch: &Tensor<S>) -> Result<ForwardPass<S>> {
    let dims = batch.shape();
    let (in_h, in_w, in_c) = net.config.input_dims;
    if dims.len() != 4 || dims[1] != in_c || dims[2] != in_h || dims[3] != in_w {
        return Err(Error::Shape(format!(
            "batch shape {dims:?} does not match input dims [N, {in_c}, {in_h}, {in_w}]"
        )));
    }
    let mut activations = Vec::with_capacity(net.config.layers.len() + 1);
    activations.push(batch.clone());
    for (i, spec) in net.config.layers.iter().enumerate() {
        let out = layers::forward_layer(
            spec,
            &net.shapes[i],
            net.params[i].as_ref(),
            activations.last().unwrap(),
        );
        activations.push(out);
    }
    Ok(ForwardPass { activations })
}

/// Numerically stable softmax (max-subtraction). Entries are in (0, 1] and sum
/// to 1; invariant under adding a constant to all logits.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut out: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: S = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

/// `-log p[true_class]`.
pub fn cross_entropy_loss<S: Scalar>(probs: &[S], true_class: usize) -> Result<S> {
    if true_class >= probs.len() {
        return Err(Error::Invalid(format!(
            "class index {true_class} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs[true_class].ln())
}

/// Mean cross-entropy over the batch, computed via log-softmax so the value
/// stays finite for any finite logits.
pub fn batch_loss<S: Scalar>(pass: &ForwardPass<S>, labels: &[usize]) -> Result<S> {
    let b = pass.batch_size();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    let mut total = S::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = pass.logit_row(i);
        if label >= row.len() {
            return Err(Error::Invalid(format!(
                "label {label} out of range for {} classes",
                row.len()
            )));
        }
        let max = row
            .iter()
            .copied()
            .fold(S::neg_infinity(), |a, v| if v > a { v } else { a });
        let lse: S = row.iter().map(|&z| (z - max).exp()).sum();
        total = total + (max + lse.ln() - row[label]);
    }
    Ok(total / s64::<S>(b as f64))
}

/// Per-parameter gradients of the batch-mean cross-entropy loss. Frozen layers
/// report zero gradients.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub layers: Vec<Option<LayerParams<S>>>,
}

/// Backpropagate through a matching forward pass.
pub fn backward<S: Scalar>(
    net: &Network<S>,
    pass: &ForwardPass<S>,
    labels: &[usize],
) -> Result<Gradients<S>> {
    layers::backward_network(net, pass, labels)
}
