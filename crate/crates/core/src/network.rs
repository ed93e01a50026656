//! Layer definitions, the feature/head split architecture and dropout masks.
//!
//! A [`SplitNetwork`] is an ordered layer list cut at `split_index`: layers
//! before the cut form the deterministic feature part (no dropout allowed),
//! layers after it form the head. Because the feature part is a pure function
//! of the input, its output can be computed once and reused for every
//! stochastic head pass — see [`crate::uncertainty::sample_predictions`].
//!
//! Gradients are hand-written per layer kind; there is no autodiff graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One layer kind. Dropout layers carry no weights and no rate; the rate is
/// supplied at run time, a single value shared by every dropout layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool2x2,
    GlobalMaxPool,
    Maxout {
        group_size: usize,
    },
    Dropout,
    Softmax,
    Sigmoid,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    /// Shape of this layer's output given its input shape.
    fn output_shape(&self, input: &[usize], layer_index: usize) -> Result<Vec<usize>> {
        let fail = |detail: String| Error::LayerShape {
            layer_index,
            detail,
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let flat: usize = input.iter().product();
                if flat != inputs {
                    return Err(fail(format!(
                        "dense expects {inputs} inputs, incoming shape {input:?} has {flat}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
            } => {
                if input.len() != 3 {
                    return Err(fail(format!("conv expects CHW input, got {input:?}")));
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                if c != in_channels {
                    return Err(fail(format!(
                        "conv expects {in_channels} input channels, got {c}"
                    )));
                }
                if kernel > h || kernel > w {
                    return Err(fail(format!(
                        "kernel {kernel}x{kernel} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
            }
            LayerSpec::Relu | LayerSpec::Dropout | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(fail(format!(
                        "softmax expects a vector input, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool2x2 => {
                if input.len() != 3 || !input[1].is_multiple_of(2) || !input[2].is_multiple_of(2) {
                    return Err(fail(format!(
                        "max-pool 2x2 expects CHW input with even spatial dims, got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::GlobalMaxPool => {
                if input.len() != 3 {
                    return Err(fail(format!(
                        "global max-pool expects CHW input, got {input:?}"
                    )));
                }
                Ok(vec![input[0]])
            }
            LayerSpec::Maxout { group_size } => {
                if input.len() != 1 {
                    return Err(fail(format!(
                        "maxout expects a vector input, got {input:?}"
                    )));
                }
                let width = input[0];
                if group_size < 2 || !width.is_multiple_of(group_size) {
                    return Err(fail(format!(
                        "maxout group size {group_size} must be >= 2 and divide width {width}"
                    )));
                }
                Ok(vec![width / group_size])
            }
        }
    }
}

/// A layer spec plus its parameters (present only for Dense/Conv).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) weight: Option<Tensor>,
    pub(crate) bias: Option<Tensor>,
}

impl Layer {
    /// Builds a layer from explicit parts, checking that parameters are
    /// present exactly when the layer kind carries weights.
    pub fn from_parts(
        spec: LayerSpec,
        weight: Option<Tensor>,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        if spec.has_weights() != (weight.is_some() && bias.is_some()) {
            return Err(Error::Argument(format!(
                "layer {spec:?} expects weights: {}, got weight: {}, bias: {}",
                spec.has_weights(),
                weight.is_some(),
                bias.is_some()
            )));
        }
        Ok(Self { spec, weight, bias })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Which loss the backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Euclidean,
}

/// Per-pass dropout masks: one binary tensor per dropout layer in the head.
///
/// Masks are a pure function of `(base_seed, pass)` under the counter RNG;
/// regenerating with the same key yields identical masks on any platform and
/// any thread schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep_prob: f64,
    pub masks: Vec<Tensor>,
    pub base_seed: u64,
    pub pass: u64,
}

impl DropoutMask {
    /// Samples masks for every dropout layer of `net`'s head.
    ///
    /// Entry `u` of the mask for the dropout layer at absolute index `l` is
    /// `1` iff `uniform(base_seed, [domain, pass, l, u]) < keep_prob`.
    pub fn generate(
        net: &SplitNetwork,
        keep_prob: f64,
        domain: u64,
        base_seed: u64,
        pass: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_prob) {
            return Err(Error::Argument(format!(
                "keep probability must lie in [0, 1], got {keep_prob}"
            )));
        }
        let shapes = net.layer_input_shapes()?;
        let mut masks = Vec::new();
        for (li, layer) in net.layers.iter().enumerate() {
            if layer.spec == LayerSpec::Dropout {
                let shape = shapes[li].clone();
                let units: usize = shape.iter().product();
                let data = (0..units)
                    .map(|u| {
                        let kept = rng::uniform(base_seed, &[domain, pass, li as u64, u as u64])
                            < keep_prob;
                        if kept {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                masks.push(Tensor::new(shape, data)?);
            }
        }
        Ok(Self {
            keep_prob,
            masks,
            base_seed,
            pass,
        })
    }

    /// Assembles a mask from explicit tensors, for tests and tooling.
    pub fn from_parts(keep_prob: f64, masks: Vec<Tensor>) -> Self {
        Self {
            keep_prob,
            masks,
            base_seed: 0,
            pass: 0,
        }
    }
}

/// Ordered layer graph split into a deterministic feature part
/// (`layers[..split_index]`) and a stochastic head (`layers[split_index..]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitNetwork {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    split_index: usize,
    base_seed: u64,
}

impl SplitNetwork {
    /// Builds a network with seeded Glorot-uniform weights and zero biases.
    pub fn new(
        input_shape: Vec<usize>,
        feature: Vec<LayerSpec>,
        head: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let split_index = feature.len();
        let specs: Vec<LayerSpec> = feature.into_iter().chain(head).collect();
        let mut layers = Vec::with_capacity(specs.len());
        for (li, spec) in specs.into_iter().enumerate() {
            let (weight, bias) = match spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                    let data = (0..outputs * inputs)
                        .map(|i| {
                            (2.0 * rng::uniform(seed, &[rng::DOMAIN_INIT, li as u64, i as u64])
                                - 1.0)
                                * limit
                        })
                        .collect();
                    (
                        Some(Tensor::new(vec![outputs, inputs], data)?),
                        Some(Tensor::zeros(vec![outputs])),
                    )
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let data = (0..out_channels * in_channels * kernel * kernel)
                        .map(|i| {
                            (2.0 * rng::uniform(seed, &[rng::DOMAIN_INIT, li as u64, i as u64])
                                - 1.0)
                                * limit
                        })
                        .collect();
                    (
                        Some(Tensor::new(
                            vec![out_channels, in_channels, kernel, kernel],
                            data,
                        )?),
                        Some(Tensor::zeros(vec![out_channels])),
                    )
                }
                _ => (None, None),
            };
            layers.push(Layer { spec, weight, bias });
        }
        let net = Self {
            input_shape,
            layers,
            split_index,
            base_seed: seed,
        };
        net.validate_split()?;
        Ok(net)
    }

    /// Reassembles a network from explicit parts (checkpoint loading).
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        split_index: usize,
        base_seed: u64,
    ) -> Result<Self> {
        if split_index > layers.len() {
            return Err(Error::Argument(format!(
                "split index {split_index} exceeds layer count {}",
                layers.len()
            )));
        }
        let net = Self {
            input_shape,
            layers,
            split_index,
            base_seed,
        };
        net.validate_split()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn feature_part(&self) -> &[Layer] {
        &self.layers[..self.split_index]
    }

    pub fn head_part(&self) -> &[Layer] {
        &self.layers[self.split_index..]
    }

    /// Number of output classes (length of the final activation).
    pub fn output_len(&self) -> Result<usize> {
        let shapes = self.layer_input_shapes()?;
        Ok(shapes
            .last()
            .expect("shape chain never empty")
            .iter()
            .product())
    }

    /// Replaces the weight tensor of the layer at `layer_index`.
    pub fn set_weight(&mut self, layer_index: usize, weight: Tensor) -> Result<()> {
        let layer = self.layer_mut(layer_index)?;
        match &layer.weight {
            Some(old) if old.shape() == weight.shape() => {
                layer.weight = Some(weight);
                Ok(())
            }
            Some(old) => Err(Error::ShapeMismatch {
                op: "set_weight",
                left: old.shape().to_vec(),
                right: weight.shape().to_vec(),
            }),
            None => Err(Error::Argument(format!(
                "layer {layer_index} carries no weights"
            ))),
        }
    }

    /// Replaces the bias tensor of the layer at `layer_index`.
    pub fn set_bias(&mut self, layer_index: usize, bias: Tensor) -> Result<()> {
        let layer = self.layer_mut(layer_index)?;
        match &layer.bias {
            Some(old) if old.shape() == bias.shape() => {
                layer.bias = Some(bias);
                Ok(())
            }
            Some(old) => Err(Error::ShapeMismatch {
                op: "set_bias",
                left: old.shape().to_vec(),
                right: bias.shape().to_vec(),
            }),
            None => Err(Error::Argument(format!(
                "layer {layer_index} carries no bias"
            ))),
        }
    }

    fn layer_mut(&mut self, layer_index: usize) -> Result<&mut Layer> {
        let count = self.layers.len();
        self.layers
            .get_mut(layer_index)
            .ok_or_else(|| Error::Argument(format!("layer index {layer_index} out of {count}")))
    }

    /// Rounds every parameter through f32, the precision checkpoints store.
    ///
    /// Trained networks are quantized once before saving so that in-memory
    /// evaluation and evaluation of the reloaded checkpoint agree bit-exactly.
    pub fn quantize_weights_f32(&mut self) {
        for layer in &mut self.layers {
            for tensor in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                for v in tensor.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    /// Input shape of every layer, plus the final output shape at the end.
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut current = self.input_shape.clone();
        shapes.push(current.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            current = layer.spec.output_shape(&current, li)?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    /// Checks the split invariant (no dropout in the feature part) and that
    /// the layer shape chain is consistent end to end.
    pub fn validate_split(&self) -> Result<()> {
        for (li, layer) in self.layers[..self.split_index].iter().enumerate() {
            if layer.spec == LayerSpec::Dropout {
                return Err(Error::SplitViolation { layer_index: li });
            }
        }
        self.layer_input_shapes()?;
        Ok(())
    }

    /// Full forward pass with every dropout layer acting as identity.
    pub fn forward_deterministic(&self, x: &Tensor) -> Result<Tensor> {
        let acts = self.forward_all(x, None)?;
        Ok(acts.into_iter().last().expect("activations never empty"))
    }

    /// Output of the feature part: deterministic and cacheable.
    pub fn compute_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut current = x.clone();
        for (li, layer) in self.layers[..self.split_index].iter().enumerate() {
            current = apply_layer(layer, li, &current, None)?;
        }
        Ok(current)
    }

    /// Head pass over cached features with the given dropout masks.
    ///
    /// Each dropout layer multiplies its input elementwise by
    /// `mask / keep_prob` (inverted dropout), so the expected activation
    /// equals the unmasked one and `keep_prob = 1` reproduces the
    /// deterministic head exactly.
    pub fn forward_head(&self, features: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
        let shapes = self.layer_input_shapes()?;
        if features.shape() != shapes[self.split_index].as_slice() {
            return Err(Error::ShapeMismatch {
                op: "forward_head",
                left: features.shape().to_vec(),
                right: shapes[self.split_index].clone(),
            });
        }
        let mut current = features.clone();
        let mut dropout_seen = 0usize;
        for (offset, layer) in self.layers[self.split_index..].iter().enumerate() {
            let li = self.split_index + offset;
            let layer_mask = if layer.spec == LayerSpec::Dropout {
                let m = mask.masks.get(dropout_seen).ok_or_else(|| {
                    Error::Argument(format!(
                        "mask provides {} tensors but head has more dropout layers",
                        mask.masks.len()
                    ))
                })?;
                dropout_seen += 1;
                Some((m, mask.keep_prob))
            } else {
                None
            };
            current = apply_layer(layer, li, &current, layer_mask)?;
        }
        Ok(current)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: x.shape().to_vec(),
                right: self.input_shape.clone(),
            });
        }
        Ok(())
    }

    /// Forward pass recording the activation entering each layer; the last
    /// element is the network output. `mask`, when given, is applied to the
    /// head's dropout layers; otherwise dropout is identity.
    pub(crate) fn forward_all(
        &self,
        x: &Tensor,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        let mut dropout_seen = 0usize;
        for (li, layer) in self.layers.iter().enumerate() {
            let layer_mask = match (layer.spec, mask) {
                (LayerSpec::Dropout, Some(m)) => {
                    let tensor = m.masks.get(dropout_seen).ok_or_else(|| {
                        Error::Argument(format!(
                            "mask provides {} tensors but network has more dropout layers",
                            m.masks.len()
                        ))
                    })?;
                    dropout_seen += 1;
                    Some((tensor, m.keep_prob))
                }
                _ => None,
            };
            let next = apply_layer(layer, li, acts.last().expect("nonempty"), layer_mask)?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Analytic gradients of `loss` w.r.t. every weight and bias.
    ///
    /// Dropout masks are applied exactly as in the forward pass. The
    /// sigmoid + cross-entropy pairing uses the cancelled gradient
    /// `prediction - target` at the pre-activation, which is not scaled by
    /// the sigmoid derivative.
    pub fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        loss: LossKind,
        mask: Option<&DropoutMask>,
    ) -> Result<Gradients> {
        let acts = self.forward_all(x, mask)?;
        self.backward_from_acts(&acts, y, loss, mask)
    }

    /// Backward pass over previously recorded activations.
    pub(crate) fn backward_from_acts(
        &self,
        acts: &[Tensor],
        y: &Tensor,
        loss: LossKind,
        mask: Option<&DropoutMask>,
    ) -> Result<Gradients> {
        let output = acts.last().expect("activations never empty");
        if output.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward target",
                left: y.shape().to_vec(),
                right: output.shape().to_vec(),
            });
        }
        let n = self.layers.len();
        let mut grads: Vec<LayerGradients> = self
            .layers
            .iter()
            .map(|_| LayerGradients {
                weight: None,
                bias: None,
            })
            .collect();

        // Gradient flowing into the layer walk, plus the index of the first
        // layer (from the top) that still needs a generic backward step.
        let (mut delta, start) = match (loss, self.layers.last().map(|l| l.spec)) {
            (LossKind::CrossEntropy, Some(LayerSpec::Sigmoid)) => {
                // Cancelled form: gradient at the pre-sigmoid activation.
                (output.sub(y)?, n - 1)
            }
            (LossKind::CrossEntropy, Some(LayerSpec::Softmax)) => {
                let g = cross_entropy_output_grad(y, output);
                let pre = softmax_backward(output, &g)?;
                (pre, n - 1)
            }
            (LossKind::CrossEntropy, other) => {
                return Err(Error::UnsupportedLossHead(format!(
                    "cross-entropy requires a sigmoid or softmax final layer, found {other:?}"
                )));
            }
            (LossKind::Euclidean, _) => (output.sub(y)?, n),
        };

        // Ordinal of each dropout layer among all dropout layers, so the
        // reverse walk can pick the matching mask tensor.
        let mut dropout_ordinal = vec![0usize; n];
        let mut seen = 0usize;
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.spec == LayerSpec::Dropout {
                dropout_ordinal[li] = seen;
                seen += 1;
            }
        }

        for li in (0..start).rev() {
            let layer = &self.layers[li];
            let input = &acts[li];
            let out = &acts[li + 1];
            let layer_mask = if layer.spec == LayerSpec::Dropout {
                mask.map(|m| (&m.masks[dropout_ordinal[li]], m.keep_prob))
            } else {
                None
            };
            let (prev, layer_grads) = backward_layer(layer, input, out, &delta, layer_mask)?;
            if let Some((dw, db)) = layer_grads {
                grads[li] = LayerGradients {
                    weight: Some(dw),
                    bias: Some(db),
                };
            }
            delta = prev;
        }
        Ok(Gradients { layers: grads })
    }
}

/// Gradient tensors for one layer (present only where the layer has weights).
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Gradients aligned with `SplitNetwork::layers`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

/// d(cross-entropy)/d(prediction), with predictions clipped away from {0, 1}
/// so the quotient stays finite.
fn cross_entropy_output_grad(y: &Tensor, output: &Tensor) -> Tensor {
    const EPS: f64 = 1e-12;
    let data = y
        .data()
        .iter()
        .zip(output.data())
        .map(|(&yi, &pi)| {
            let p = pi.clamp(EPS, 1.0 - EPS);
            -yi / p + (1.0 - yi) / (1.0 - p)
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// Pulls a gradient back through softmax: `dz_j = y_j (g_j - sum_i g_i y_i)`.
fn softmax_backward(output: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let dot: f64 = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| o * g)
        .sum();
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| o * (g - dot))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

fn apply_layer(
    layer: &Layer,
    layer_index: usize,
    input: &Tensor,
    mask: Option<(&Tensor, f64)>,
) -> Result<Tensor> {
    let shape_err = |detail: String| Error::LayerShape {
        layer_index,
        detail,
    };
    match layer.spec {
        LayerSpec::Dense { inputs, outputs } => {
            if input.len() != inputs {
                return Err(shape_err(format!(
                    "dense expects {inputs} inputs, got {:?}",
                    input.shape()
                )));
            }
            let w = layer.weight.as_ref().expect("dense has weights");
            let b = layer.bias.as_ref().expect("dense has bias");
            let col = input.reshaped(vec![inputs, 1])?;
            let out = w.matmul(&col)?.reshaped(vec![outputs])?;
            out.add(b)
        }
        LayerSpec::Conv { .. } => {
            let w = layer.weight.as_ref().expect("conv has weights");
            let b = layer.bias.as_ref().expect("conv has bias");
            input.conv2d_valid(w, b).map_err(|e| match e {
                Error::ShapeMismatch { left, right, .. } => shape_err(format!(
                    "conv input {left:?} incompatible with kernels {right:?}"
                )),
                other => other,
            })
        }
        LayerSpec::Relu => Ok(input.clamp_min(0.0)),
        LayerSpec::MaxPool2x2 => {
            let s = input.shape();
            if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
                return Err(shape_err(format!("max-pool 2x2 on {s:?}")));
            }
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = input.data()[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[ch * oh * ow + oy * ow + ox] = best;
                    }
                }
            }
            Tensor::new(vec![c, oh, ow], out)
        }
        LayerSpec::GlobalMaxPool => {
            let s = input.shape();
            if s.len() != 3 {
                return Err(shape_err(format!("global max-pool on {s:?}")));
            }
            let (c, hw) = (s[0], s[1] * s[2]);
            let out = (0..c)
                .map(|ch| {
                    input.data()[ch * hw..(ch + 1) * hw]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            Tensor::new(vec![c], out)
        }
        LayerSpec::Maxout { group_size } => {
            let width = input.len();
            if input.rank() != 1 || !width.is_multiple_of(group_size) {
                return Err(shape_err(format!(
                    "maxout({group_size}) on shape {:?}",
                    input.shape()
                )));
            }
            let out = input
                .data()
                .chunks(group_size)
                .map(|g| g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Tensor::new(vec![width / group_size], out)
        }
        LayerSpec::Dropout => match mask {
            None => Ok(input.clone()),
            Some((m, keep_prob)) => {
                if m.shape() != input.shape() {
                    return Err(shape_err(format!(
                        "dropout mask shape {:?} does not match activation {:?}",
                        m.shape(),
                        input.shape()
                    )));
                }
                if keep_prob == 1.0 {
                    return Ok(input.clone());
                }
                let scaled = m.scale(1.0 / keep_prob);
                input.mul(&scaled)
            }
        },
        LayerSpec::Softmax => {
            if input.rank() != 1 {
                return Err(shape_err(format!("softmax on shape {:?}", input.shape())));
            }
            let max = input
                .data()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = input.data().iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Tensor::new(
                vec![input.len()],
                exps.into_iter().map(|e| e / sum).collect(),
            )
        }
        LayerSpec::Sigmoid => Ok(Tensor::new(
            input.shape().to_vec(),
            input.data().iter().map(|&v| sigmoid(v)).collect(),
        )?),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One layer's backward step: gradient w.r.t. its input, plus parameter
/// gradients where the layer has them. Ties in max-style layers route the
/// gradient to the lowest index, matching the forward tie-break.
fn backward_layer(
    layer: &Layer,
    input: &Tensor,
    output: &Tensor,
    delta: &Tensor,
    mask: Option<(&Tensor, f64)>,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    match layer.spec {
        LayerSpec::Dense { inputs, outputs } => {
            let w = layer.weight.as_ref().expect("dense has weights");
            let flat = input.reshaped(vec![inputs])?;
            let mut dw = vec![0.0; outputs * inputs];
            for o in 0..outputs {
                let d = delta.data()[o];
                for i in 0..inputs {
                    dw[o * inputs + i] = d * flat.data()[i];
                }
            }
            let db = delta.clone();
            let mut dx = vec![0.0; inputs];
            for o in 0..outputs {
                let d = delta.data()[o];
                let row = &w.data()[o * inputs..(o + 1) * inputs];
                for (dxi, &wi) in dx.iter_mut().zip(row) {
                    *dxi += wi * d;
                }
            }
            let dx = Tensor::new(input.shape().to_vec(), dx)?;
            Ok((dx, Some((Tensor::new(vec![outputs, inputs], dw)?, db))))
        }
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
        } => {
            let w = layer.weight.as_ref().expect("conv has weights");
            let (h, wd) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (output.shape()[1], output.shape()[2]);
            let mut dk = vec![0.0; out_channels * in_channels * kernel * kernel];
            let mut db = vec![0.0; out_channels];
            let mut dx = vec![0.0; in_channels * h * wd];
            for k in 0..out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let d = delta.data()[k * oh * ow + oy * ow + ox];
                        if d == 0.0 {
                            continue;
                        }
                        for c in 0..in_channels {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let xi = c * h * wd + (oy + ky) * wd + ox + kx;
                                    let wi = k * in_channels * kernel * kernel
                                        + c * kernel * kernel
                                        + ky * kernel
                                        + kx;
                                    dk[wi] += d * input.data()[xi];
                                    dx[xi] += d * w.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
            for (k, dbk) in db.iter_mut().enumerate() {
                *dbk = delta.data()[k * oh * ow..(k + 1) * oh * ow].iter().sum();
            }
            Ok((
                Tensor::new(input.shape().to_vec(), dx)?,
                Some((
                    Tensor::new(vec![out_channels, in_channels, kernel, kernel], dk)?,
                    Tensor::new(vec![out_channels], db)?,
                )),
            ))
        }
        LayerSpec::Relu => {
            let data = input
                .data()
                .iter()
                .zip(delta.data())
                .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                .collect();
            Ok((Tensor::new(input.shape().to_vec(), data)?, None))
        }
        LayerSpec::MaxPool2x2 => {
            let s = input.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dxp in 0..2 {
                                let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dxp;
                                let v = input.data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        dx[best_idx] += delta.data()[ch * oh * ow + oy * ow + ox];
                    }
                }
            }
            Ok((Tensor::new(s.to_vec(), dx)?, None))
        }
        LayerSpec::GlobalMaxPool => {
            let s = input.shape();
            let (c, hw) = (s[0], s[1] * s[2]);
            let mut dx = vec![0.0; c * hw];
            for ch in 0..c {
                let slice = &input.data()[ch * hw..(ch + 1) * hw];
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (i, &v) in slice.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_idx = i;
                    }
                }
                dx[ch * hw + best_idx] = delta.data()[ch];
            }
            Ok((Tensor::new(s.to_vec(), dx)?, None))
        }
        LayerSpec::Maxout { group_size } => {
            let mut dx = vec![0.0; input.len()];
            for (g, chunk) in input.data().chunks(group_size).enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (i, &v) in chunk.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_idx = i;
                    }
                }
                dx[g * group_size + best_idx] = delta.data()[g];
            }
            Ok((Tensor::new(input.shape().to_vec(), dx)?, None))
        }
        LayerSpec::Dropout => match mask {
            None => Ok((delta.clone(), None)),
            Some((m, keep_prob)) => {
                if keep_prob == 1.0 {
                    return Ok((delta.clone(), None));
                }
                let scaled = m.scale(1.0 / keep_prob);
                Ok((delta.mul(&scaled)?, None))
            }
        },
        LayerSpec::Softmax => Ok((softmax_backward(output, delta)?, None)),
        LayerSpec::Sigmoid => {
            let data = output
                .data()
                .iter()
                .zip(delta.data())
                .map(|(&o, &d)| d * o * (1.0 - o))
                .collect();
            Ok((Tensor::new(output.shape().to_vec(), data)?, None))
        }
    }
}
