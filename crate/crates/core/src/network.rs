//! Feed-forward spiking networks evaluated over `T` timesteps.
//!
//! A network is a list of [`LayerSpec`]s. Weight layers (linear, conv2d)
//! followed by a neuron emit spikes; the final linear layer has no neuron
//! and emits logits at every step. Pooling and flatten are stateless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neurons::{self, NeuronParams, ScalarVars};
use crate::tensor::{conv2d_output_extent, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    AvgPool {
        kernel: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neuron: Option<NeuronParams>,
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize, neuron: Option<NeuronParams>) -> Self {
        Self {
            kind: LayerKind::Linear {
                in_features,
                out_features,
            },
            neuron,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, neuron: NeuronParams) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                padding: 0,
            },
            neuron: Some(neuron),
        }
    }

    pub fn avgpool(kernel: usize) -> Self {
        Self {
            kind: LayerKind::AvgPool { kernel },
            neuron: None,
        }
    }

    pub fn flatten() -> Self {
        Self {
            kind: LayerKind::Flatten,
            neuron: None,
        }
    }
}

/// `flatten -> linear(in, h) -> ... -> linear(h_last, classes)` with spiking hidden layers.
pub fn mlp(input: usize, hidden: &[usize], classes: usize, neuron: NeuronParams) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::flatten()];
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::linear(prev, h, Some(neuron)));
        prev = h;
    }
    layers.push(LayerSpec::linear(prev, classes, None));
    layers
}

/// conv 16@5x5 -> pool 2 -> conv 32@5x5 -> pool 2 -> flatten -> linear(classes),
/// for single-channel 28x28 input.
pub fn conv_small(classes: usize, neuron: NeuronParams) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(1, 16, 5, neuron),
        LayerSpec::avgpool(2),
        LayerSpec::conv2d(16, 32, 5, neuron),
        LayerSpec::avgpool(2),
        LayerSpec::flatten(),
        LayerSpec::linear(32 * 4 * 4, classes, None),
    ]
}

/// Network input, either one frame presented at every step or explicit frames.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodedInput {
    /// `frame` is [B, ...] and is fed unchanged for `steps` steps.
    Direct { frame: Tensor, steps: usize },
    /// [T, B, ...].
    Frames(Tensor),
}

impl EncodedInput {
    pub fn steps(&self) -> usize {
        match self {
            EncodedInput::Direct { steps, .. } => *steps,
            EncodedInput::Frames(f) => f.shape().first().copied().unwrap_or(0),
        }
    }

    /// Shape of one step's input, [B, ...].
    pub fn frame_shape(&self) -> &[usize] {
        match self {
            EncodedInput::Direct { frame, .. } => frame.shape(),
            EncodedInput::Frames(f) => &f.shape()[1.min(f.shape().len())..],
        }
    }

    pub fn batch(&self) -> usize {
        self.frame_shape().first().copied().unwrap_or(0)
    }

    /// Whether the values entering the first layer are spikes.
    pub fn is_binary(&self) -> bool {
        match self {
            EncodedInput::Direct { frame, .. } => frame.is_binary(),
            EncodedInput::Frames(f) => f.is_binary(),
        }
    }

    pub fn frame(&self, t: usize) -> Result<Tensor> {
        match self {
            EncodedInput::Direct { frame, .. } => Ok(frame.clone()),
            EncodedInput::Frames(f) => f.index_axis0(t),
        }
    }

    /// The same input restricted to batch rows `indices`.
    pub fn select(&self, indices: &[usize]) -> Result<EncodedInput> {
        match self {
            EncodedInput::Direct { frame, steps } => Ok(EncodedInput::Direct {
                frame: frame.select_axis0(indices)?,
                steps: *steps,
            }),
            EncodedInput::Frames(f) => {
                let parts = (0..self.steps())
                    .map(|t| f.index_axis0(t)?.select_axis0(indices))
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedInput::Frames(Tensor::stack(&parts)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Per-sample input and output shapes.
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    /// Scalar learnables of an adaptive neuron; present on every spiking layer.
    pub alpha: Option<Tensor>,
    pub beta: Option<Tensor>,
}

impl Layer {
    pub fn is_spiking(&self) -> bool {
        self.spec.neuron.is_some()
    }

    pub fn neuron(&self) -> Option<&NeuronParams> {
        self.spec.neuron.as_ref()
    }

    /// Synapses per sample per step.
    pub fn synapses(&self) -> usize {
        match self.spec.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => in_features * out_features,
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => self.out_shape.iter().product::<usize>() * in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.weight, &self.bias, &self.alpha, &self.beta]
            .iter()
            .filter_map(|t| t.as_ref().map(Tensor::numel))
            .sum()
    }
}

/// What a trained parameter is, for decay and clamping rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Alpha,
    Beta,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Alpha => "alpha",
            ParamKind::Beta => "beta",
        }
    }
}

/// A mutable view of one trainable tensor.
pub struct ParamMut<'a> {
    pub layer: usize,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor,
}

impl ParamMut<'_> {
    pub fn name(&self) -> String {
        format!("layer{}.{}", self.layer, self.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Parameter leaves of one network on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    layers: Vec<BoundLayer>,
}

#[derive(Debug, Clone, Copy, Default)]
struct BoundLayer {
    weight: Option<Var>,
    bias: Option<Var>,
    alpha: Option<Var>,
    beta: Option<Var>,
}

/// Tape handles produced by [`Network::forward_on`]. Per-step values are
/// stacked step-major along the leading axis.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub steps: usize,
    pub batch: usize,
    /// Readout, [T * B, classes].
    pub logits: Var,
    /// `(layer index, spikes [T * B, ...])` for every spiking layer.
    pub spikes: Vec<(usize, Var)>,
}

/// Plain-value result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    /// [T, B, classes].
    pub logits_per_step: Tensor,
    /// [T, B, ...] for every spiking layer, in layer order.
    pub spikes_per_layer: Vec<Tensor>,
    pub spiking_layers: Vec<usize>,
}

impl Network {
    /// Validates the stack against a per-sample `input_shape` and initializes
    /// weights uniformly in `±sqrt(6 / fan_in)` from `seed`; biases start at 0.
    pub fn new(specs: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Self> {
        let n = specs.len();
        if n == 0 {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(n);
        for (i, spec) in specs.into_iter().enumerate() {
            let err = |detail: String| Error::dim("network", format!("layer {i}: {detail}"));
            let last = i + 1 == n;
            if let Some(p) = &spec.neuron {
                if !spec.kind.has_weights() {
                    return Err(err("only linear and conv2d layers can carry a neuron".into()));
                }
                if last {
                    return Err(err("the final layer is the readout and must not carry a neuron".into()));
                }
                p.validate().map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            } else if spec.kind.has_weights() && !last {
                return Err(err("hidden weight layers need a neuron".into()));
            }
            if last && !matches!(spec.kind, LayerKind::Linear { .. }) {
                return Err(err("the final layer must be a linear readout".into()));
            }

            let in_shape = shape.clone();
            let (out_shape, weight_shape, fan_in) = match spec.kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape != [in_features] {
                        return Err(err(format!("linear expects [{in_features}], receives {shape:?}")));
                    }
                    (vec![out_features], Some(vec![in_features, out_features]), in_features)
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(err(format!("conv2d expects [C, H, W], receives {shape:?}")));
                    };
                    if c != in_channels {
                        return Err(err(format!("conv2d expects {in_channels} channels, receives {c}")));
                    }
                    let (Some(oh), Some(ow)) = (
                        conv2d_output_extent(h, kernel, stride, padding),
                        conv2d_output_extent(w, kernel, stride, padding),
                    ) else {
                        return Err(err(format!("kernel {kernel} does not fit {h}x{w} with padding {padding}")));
                    };
                    (
                        vec![out_channels, oh, ow],
                        Some(vec![out_channels, in_channels, kernel, kernel]),
                        in_channels * kernel * kernel,
                    )
                }
                LayerKind::AvgPool { kernel } => {
                    let [c, h, w] = shape[..] else {
                        return Err(err(format!("avgpool expects [C, H, W], receives {shape:?}")));
                    };
                    if kernel == 0 || h < kernel || w < kernel {
                        return Err(err(format!("pool {kernel} does not fit {h}x{w}")));
                    }
                    (vec![c, h / kernel, w / kernel], None, 0)
                }
                LayerKind::Flatten => (vec![shape.iter().product()], None, 0),
            };

            let (weight, bias) = match weight_shape {
                Some(ws) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let count: usize = ws.iter().product();
                    let data = (0..count).map(|_| rng.gen_range(-bound..bound)).collect();
                    let bias_len = out_shape[0];
                    (
                        Some(Tensor::new(ws, data)?.with_requires_grad(true)),
                        Some(Tensor::zeros(&[bias_len]).with_requires_grad(true)),
                    )
                }
                None => (None, None),
            };
            let (alpha, beta) = match &spec.neuron {
                Some(p) => (
                    Some(Tensor::scalar(p.alpha).with_requires_grad(p.learns_alpha())),
                    Some(Tensor::scalar(p.beta).with_requires_grad(p.learns_beta())),
                ),
                None => (None, None),
            };
            shape = out_shape.clone();
            layers.push(Layer {
                spec,
                in_shape,
                out_shape,
                weight,
                bias,
                alpha,
                beta,
            });
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_shape[0])
    }

    pub fn spiking_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_spiking()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Every trainable tensor, in layer order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let slots = [
                (ParamKind::Weight, &mut layer.weight),
                (ParamKind::Bias, &mut layer.bias),
                (ParamKind::Alpha, &mut layer.alpha),
                (ParamKind::Beta, &mut layer.beta),
            ];
            for (kind, slot) in slots {
                if let Some(t) = slot.as_mut().filter(|t| t.requires_grad()) {
                    out.push(ParamMut {
                        layer: i,
                        kind,
                        tensor: t,
                    });
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Records parameters as tape leaves. With `track` false nothing is differentiated.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundParams {
        let mut leaf = |t: &Option<Tensor>| {
            t.as_ref().map(|t| {
                let keep = track && t.requires_grad();
                tape.leaf(t.clone().with_requires_grad(keep))
            })
        };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: leaf(&l.weight),
                bias: leaf(&l.bias),
                alpha: leaf(&l.alpha),
                beta: leaf(&l.beta),
            })
            .collect();
        BoundParams { layers }
    }

    /// Adds the tape gradients of bound parameters into their tensors.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (layer, b) in self.layers.iter_mut().zip(&bound.layers) {
            let pairs = [
                (&mut layer.weight, b.weight),
                (&mut layer.bias, b.bias),
                (&mut layer.alpha, b.alpha),
                (&mut layer.beta, b.beta),
            ];
            for (slot, var) in pairs {
                if let (Some(t), Some(v)) = (slot.as_mut(), var) {
                    if let Some(g) = tape.grad(v) {
                        t.accumulate_grad(g)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_stateless(&self, tape: &mut Tape, i: usize, bound: &BoundParams, x: Var) -> Result<Var> {
        let layer = &self.layers[i];
        let b = &bound.layers[i];
        let batch = tape.shape(x)[0];
        let with_index = |e: Error| match e {
            Error::Dimension { op, detail } => Error::Dimension {
                op,
                detail: format!("layer {i}: {detail}"),
            },
            other => other,
        };
        match layer.spec.kind {
            LayerKind::Linear { .. } => {
                let w = b.weight.expect("linear weight");
                let y = tape.matmul(x, w).map_err(with_index)?;
                tape.add_bias(y, b.bias.expect("linear bias")).map_err(with_index)
            }
            LayerKind::Conv2d { stride, padding, .. } => tape
                .conv2d(x, b.weight.expect("conv weight"), b.bias, stride, padding)
                .map_err(with_index),
            LayerKind::AvgPool { kernel } => tape.avgpool2d(x, kernel).map_err(with_index),
            LayerKind::Flatten => {
                let n = layer.out_shape[0];
                tape.reshape(x, &[batch, n]).map_err(with_index)
            }
        }
    }

    /// Runs all `T` steps on `tape`, one layer at a time over the stacked
    /// steps. Each spiking layer starts from a zero state; the readout
    /// produces logits at every step.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, input: &EncodedInput) -> Result<ForwardVars> {
        let steps = input.steps();
        if steps == 0 {
            return Err(Error::Contract("forward needs at least one timestep".into()));
        }
        let frame_shape = input.frame_shape();
        if frame_shape.len() != self.input_shape.len() + 1 || frame_shape[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "network",
                format!(
                    "layer 0: input frames {frame_shape:?} do not match [B, {:?}]",
                    self.input_shape
                ),
            ));
        }
        let batch = frame_shape[0];

        // `shared` while the activation is the same at every step and held once as [B, ...].
        let (mut x, mut shared) = match input {
            EncodedInput::Direct { frame, .. } => (tape.constant(frame.clone()), true),
            EncodedInput::Frames(f) => {
                let mut shape = vec![steps * batch];
                shape.extend_from_slice(&self.input_shape);
                (tape.constant(f.clone().reshape(&shape)?), false)
            }
        };
        let mut spikes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = self.apply_stateless(tape, i, bound, x)?;
            x = match layer.neuron() {
                Some(params) => {
                    let b = &bound.layers[i];
                    let scalars = ScalarVars {
                        alpha: b.alpha.expect("spiking layer alpha"),
                        beta: b.beta.expect("spiking layer beta"),
                    };
                    let s = neurons::sequence_on(tape, params, scalars, pre, steps, shared)?;
                    shared = false;
                    spikes.push((i, s));
                    s
                }
                None => pre,
            };
        }
        let logits = if shared {
            let copies = vec![x; steps];
            let stacked = tape.stack(&copies)?;
            tape.reshape(stacked, &[steps * batch, self.classes()])?
        } else {
            x
        };
        Ok(ForwardVars {
            steps,
            batch,
            logits,
            spikes,
        })
    }

    /// Inference-only forward pass returning plain tensors.
    pub fn forward(&self, input: &EncodedInput) -> Result<NetworkOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let vars = self.forward_on(&mut tape, &bound, input)?;
        self.take_output(&mut tape, &vars)
    }

    pub fn collect_output(&self, tape: &Tape, vars: &ForwardVars) -> Result<NetworkOutput> {
        Self::split_output(vars, |v| tape.value(v).clone())
    }

    /// [`Network::collect_output`] that moves the tensors out of `tape`.
    pub fn take_output(&self, tape: &mut Tape, vars: &ForwardVars) -> Result<NetworkOutput> {
        Self::split_output(vars, |v| tape.take_value(v))
    }

    fn split_output(vars: &ForwardVars, mut get: impl FnMut(Var) -> Tensor) -> Result<NetworkOutput> {
        let mut split = |v: Var| {
            let t = get(v);
            let mut shape = vec![vars.steps, vars.batch];
            shape.extend_from_slice(&t.shape()[1..]);
            t.reshape(&shape)
        };
        Ok(NetworkOutput {
            logits_per_step: split(vars.logits)?,
            spikes_per_layer: vars.spikes.iter().map(|&(_, v)| split(v)).collect::<Result<_>>()?,
            spiking_layers: vars.spikes.iter().map(|(i, _)| *i).collect(),
        })
    }

    /// `(layer, alpha, beta)` for every spiking layer, with alpha as the
    /// decay actually uses it.
    pub fn track_params(&self) -> Vec<(usize, f64, f64)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let p = l.neuron()?;
                let alpha = l.alpha.as_ref().map_or(p.alpha, |t| t.data()[0]);
                let beta = l.beta.as_ref().map_or(p.beta, |t| t.data()[0]);
                Some((i, p.effective_alpha(alpha), beta))
            })
            .collect()
    }
}
