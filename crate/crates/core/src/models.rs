//! Model descriptions and the forward pass that records them onto a tape.
//!
//! A [`ModelSpec`] is a shared backbone followed by one dense output head per
//! task. Exactly one head is active at a time; heads that are not active are
//! frozen and do not take part in the forward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{DropoutMasks, Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Fully connected layer on `[n, inputs]`; weight stored as `[inputs, outputs]`.
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// Stride-1 "same" convolution with an odd square kernel.
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool2,
    Dropout { rate: f32 },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub name: String,
    pub outputs: usize,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, outputs: usize) -> Self {
        Self {
            name: name.into(),
            outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    feature_dim: usize,
    heads: Vec<HeadSpec>,
    active: usize,
    backbone_frozen: bool,
}

/// How dropout layers behave during one forward pass.
pub enum DropoutMode<'a, T: Scalar = f32> {
    /// Inference: dropout is the identity.
    Disabled,
    /// Sample fresh masks from the given generator.
    Sample(&'a mut ChaCha8Rng),
    /// Reuse masks recorded by an earlier pass over the same batch.
    Reuse(&'a DropoutMasks<T>),
}

/// Names `task1..taskN` for a list of head sizes.
pub fn numbered_heads(head_dims: &[usize]) -> Vec<HeadSpec> {
    head_dims
        .iter()
        .enumerate()
        .map(|(i, &d)| HeadSpec::new(format!("task{}", i + 1), d))
        .collect()
}

/// Four-conv, two-dense CNN with one output head per entry of `head_dims`.
///
/// Channel widths 32, 32, 64, 64 with 2×2 pooling after each pair, a
/// 512-unit dense layer, dropout 0.25 after pools and 0.5 before the heads.
pub fn build_cnn_multihead(input_shape: &[usize], head_dims: &[usize]) -> Result<ModelSpec> {
    build_cnn(input_shape, numbered_heads(head_dims))
}

pub fn build_cnn(input_shape: &[usize], heads: Vec<HeadSpec>) -> Result<ModelSpec> {
    let [c, h, w] = image_shape(input_shape)?;
    let mut layers = Vec::new();
    let widths = [(c, 32), (32, 32), (32, 64), (64, 64)];
    for (i, &(cin, cout)) in widths.iter().enumerate() {
        layers.push(conv(&format!("conv{i}"), cin, cout, 3));
        layers.push(Layer::Relu);
        if i % 2 == 1 {
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Dropout { rate: 0.25 });
        }
    }
    layers.push(Layer::Flatten);
    layers.push(dense("dense0", 64 * (h / 4) * (w / 4), 512));
    layers.push(Layer::Relu);
    layers.push(Layer::Dropout { rate: 0.5 });
    ModelSpec::new(input_shape.to_vec(), layers, heads)
}

/// Six-conv stand-in for a residual network, about half a million parameters
/// at 32×32 input.
pub fn build_loco_cnn(input_shape: &[usize], heads: Vec<HeadSpec>) -> Result<ModelSpec> {
    let [c, h, w] = image_shape(input_shape)?;
    let mut layers = Vec::new();
    let widths = [(c, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128)];
    for (i, &(cin, cout)) in widths.iter().enumerate() {
        layers.push(conv(&format!("conv{i}"), cin, cout, 3));
        layers.push(Layer::Relu);
        if i % 2 == 1 {
            layers.push(Layer::MaxPool2);
        }
    }
    layers.push(Layer::Flatten);
    layers.push(dense("dense0", 128 * (h / 8) * (w / 8), 128));
    layers.push(Layer::Relu);
    ModelSpec::new(input_shape.to_vec(), layers, heads)
}

/// Dense-ReLU stack; the final entry of `dims` becomes the single head `task1`.
pub fn build_mlp(dims: &[usize]) -> Result<ModelSpec> {
    if dims.len() < 2 {
        return Err(Error::config("an MLP needs at least an input and an output size"));
    }
    let (last, hidden) = dims.split_last().expect("len checked");
    build_mlp_multihead(hidden, numbered_heads(&[*last]))
}

/// Dense-ReLU backbone over `backbone_dims` with the given heads on top.
pub fn build_mlp_multihead(backbone_dims: &[usize], heads: Vec<HeadSpec>) -> Result<ModelSpec> {
    if backbone_dims.is_empty() {
        return Err(Error::config("backbone needs an input size"));
    }
    let layers = backbone_dims
        .windows(2)
        .enumerate()
        .flat_map(|(i, w)| [dense(&format!("dense{i}"), w[0], w[1]), Layer::Relu])
        .collect();
    ModelSpec::new(vec![backbone_dims[0]], layers, heads)
}

fn image_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] if c > 0 && h >= 4 && w >= 4 => Ok([c, h, w]),
        _ => Err(Error::config(format!(
            "image models need a [channels, height, width] input, got {shape:?}"
        ))),
    }
}

fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Layer {
    Layer::Conv2d {
        name: name.to_string(),
        in_channels,
        out_channels,
        kernel,
    }
}

fn dense(name: &str, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense {
        name: name.to_string(),
        inputs,
        outputs,
    }
}

fn head_prefix(head: &str) -> String {
    format!("head.{head}.")
}

impl ModelSpec {
    /// Validates the layer chain and infers the backbone's feature width.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, heads: Vec<HeadSpec>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::config("a model needs at least one head"));
        }
        for (i, h) in heads.iter().enumerate() {
            if h.outputs == 0 {
                return Err(Error::config(format!("head `{}` has zero outputs", h.name)));
            }
            if heads[..i].iter().any(|o| o.name == h.name) {
                return Err(Error::config(format!("duplicate head name `{}`", h.name)));
            }
        }
        let mut shape = input_shape.clone();
        let mut names: Vec<&str> = Vec::new();
        for layer in &layers {
            shape = match (layer, shape.as_slice()) {
                (Layer::Dense { inputs, outputs, .. }, &[d]) if d == *inputs => vec![*outputs],
                (
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    &[c, h, w],
                ) if c == *in_channels && kernel % 2 == 1 => vec![*out_channels, h, w],
                (Layer::MaxPool2, &[c, h, w]) if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
                (Layer::Flatten, s) => vec![s.iter().product()],
                (Layer::Relu, s) => s.to_vec(),
                (Layer::Dropout { rate }, s) if (0.0..1.0).contains(rate) => s.to_vec(),
                (layer, s) => {
                    return Err(Error::config(format!(
                        "layer {layer:?} cannot consume activations of shape {s:?}"
                    )))
                }
            };
            if let Layer::Dense { name, .. } | Layer::Conv2d { name, .. } = layer {
                if name.starts_with("head.") || names.contains(&name.as_str()) {
                    return Err(Error::config(format!("invalid or duplicate layer name `{name}`")));
                }
                names.push(name);
            }
        }
        let feature_dim = match shape.as_slice() {
            &[d] => d,
            s => {
                return Err(Error::config(format!(
                    "backbone must end in a flat feature vector, ends in {s:?}"
                )))
            }
        };
        Ok(Self {
            input_shape,
            layers,
            feature_dim,
            heads,
            active: 0,
            backbone_frozen: false,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn active_head(&self) -> &HeadSpec {
        &self.heads[self.active]
    }

    pub fn head(&self, name: &str) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    /// Routes forward passes through `head`; all other heads become frozen.
    pub fn activate_head(&self, head: &str) -> Result<ModelSpec> {
        let idx = self
            .heads
            .iter()
            .position(|h| h.name == head)
            .ok_or_else(|| Error::UnknownHead(head.to_string()))?;
        Ok(Self {
            active: idx,
            ..self.clone()
        })
    }

    pub fn with_frozen_backbone(&self, frozen: bool) -> ModelSpec {
        Self {
            backbone_frozen: frozen,
            ..self.clone()
        }
    }

    pub fn is_head_param(&self, name: &str) -> bool {
        name.starts_with("head.")
    }

    pub fn head_param_names(&self, head: &str) -> [String; 2] {
        let p = head_prefix(head);
        [format!("{p}weight"), format!("{p}bias")]
    }

    /// Whether `name` is trained under the current head/freeze settings.
    pub fn is_trainable(&self, name: &str) -> bool {
        if self.is_head_param(name) {
            name.starts_with(&head_prefix(&self.active_head().name))
        } else {
            !self.backbone_frozen
        }
    }

    /// Writes this spec's trainable/frozen flags into `params`.
    pub fn configure<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            params.set_trainable(&name, self.is_trainable(&name))?;
        }
        Ok(())
    }

    /// Closed-form parameter count, all heads included.
    pub fn param_count(&self) -> usize {
        let backbone: usize = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense {
                    inputs, outputs, ..
                } => inputs * outputs + outputs,
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => in_channels * out_channels * kernel * kernel + out_channels,
                _ => 0,
            })
            .sum();
        let heads: usize = self
            .heads
            .iter()
            .map(|h| self.feature_dim * h.outputs + h.outputs)
            .sum();
        backbone + heads
    }

    /// He-uniform weights and zero biases, drawn in declaration order.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense {
                    name,
                    inputs,
                    outputs,
                } => {
                    let w = he_uniform(&mut rng, &[*inputs, *outputs], *inputs);
                    insert_pair(&mut params, name, w, *outputs);
                }
                Layer::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let w = he_uniform(
                        &mut rng,
                        &[*out_channels, *in_channels, *kernel, *kernel],
                        fan_in,
                    );
                    insert_pair(&mut params, name, w, *out_channels);
                }
                _ => {}
            }
        }
        for head in &self.heads {
            let w = he_uniform(&mut rng, &[self.feature_dim, head.outputs], self.feature_dim);
            insert_pair(&mut params, &format!("head.{}", head.name), w, head.outputs);
        }
        self.configure(&mut params).expect("names come from this spec");
        params
    }

    /// Redraws the weights of one head and zeroes its bias.
    pub fn reinit_head(&self, params: &mut ParamStore, head: &str, seed: u64) -> Result<()> {
        let spec = self
            .head(head)
            .ok_or_else(|| Error::UnknownHead(head.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [wn, bn] = self.head_param_names(head);
        params.replace(
            &wn,
            he_uniform(&mut rng, &[self.feature_dim, spec.outputs], self.feature_dim),
        )?;
        params.replace(&bn, Tensor::zeros(&[spec.outputs]))
    }

    /// Records the network on a fresh tape and returns the logits node.
    pub fn record_logits<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        params: &ParamStore<T>,
        inputs: &Tensor<T>,
        dropout: DropoutMode<'_, T>,
    ) -> Result<NodeId> {
        let x = self.record_features(graph, params, inputs, dropout)?;
        let head = format!("head.{}", self.active_head().name);
        graph.set_scope(head.as_str());
        self.record_dense(graph, params, x, &head)
    }

    /// Records the backbone only and returns the `[n, feature_dim]` node.
    pub fn record_features<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        params: &ParamStore<T>,
        inputs: &Tensor<T>,
        mut dropout: DropoutMode<'_, T>,
    ) -> Result<NodeId> {
        let n = self.check_inputs(inputs.shape())?;
        graph.set_scope("input");
        let mut x = graph.input(inputs.clone())?;
        let mut dropout_index = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { name, .. } => {
                    graph.set_scope(name.as_str());
                    x = self.record_dense(graph, params, x, name)?;
                }
                Layer::Conv2d { name, kernel, .. } => {
                    graph.set_scope(name.as_str());
                    let w = self.param_node(graph, params, &format!("{name}.weight"))?;
                    let b = self.param_node(graph, params, &format!("{name}.bias"))?;
                    let y = graph.conv2d(x, w, kernel / 2)?;
                    x = graph.add_bias(y, b)?;
                }
                Layer::Relu => {
                    graph.set_scope(format!("relu{i}"));
                    x = graph.relu(x)?;
                }
                Layer::MaxPool2 => {
                    graph.set_scope(format!("pool{i}"));
                    x = graph.max_pool2(x)?;
                }
                Layer::Flatten => {
                    graph.set_scope(format!("flatten{i}"));
                    let len = graph.value(x).len() / n;
                    x = graph.reshape(x, &[n, len])?;
                }
                Layer::Dropout { rate } => {
                    graph.set_scope(format!("dropout{i}"));
                    let len = graph.value(x).len();
                    let mask = match &mut dropout {
                        DropoutMode::Disabled => None,
                        DropoutMode::Sample(rng) => Some(sample_mask(rng, len, *rate)),
                        DropoutMode::Reuse(masks) => {
                            let m = masks.get(dropout_index).ok_or_else(|| {
                                Error::state(format!("no stored dropout mask for layer {i}"))
                            })?;
                            Some(m.to_vec())
                        }
                    };
                    if let Some(mask) = mask {
                        x = graph.dropout(x, mask)?;
                    }
                    dropout_index += 1;
                }
            }
        }
        Ok(x)
    }

    fn record_dense<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        params: &ParamStore<T>,
        x: NodeId,
        name: &str,
    ) -> Result<NodeId> {
        let w = self.param_node(graph, params, &format!("{name}.weight"))?;
        let b = self.param_node(graph, params, &format!("{name}.bias"))?;
        let y = graph.matmul(x, w)?;
        graph.add_bias(y, b)
    }

    fn param_node<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        params: &ParamStore<T>,
        name: &str,
    ) -> Result<NodeId> {
        let value = params
            .get(name)
            .ok_or_else(|| Error::config(format!("parameter `{name}` missing from store")))?;
        graph.param(name, value.clone(), params.is_trainable(name))
    }

    fn check_inputs(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("model input", &expected, shape));
        }
        Ok(shape[0])
    }

    /// Runs the network and the mean cross-entropy loss on `batch`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        batch: &Batch<T>,
        dropout: DropoutMode<'_, T>,
    ) -> Result<(f64, Graph<T>)> {
        if batch.is_empty() {
            return Err(Error::config("forward needs a non-empty batch"));
        }
        let mut graph = Graph::new();
        let logits = self.record_logits(&mut graph, params, &batch.inputs, dropout)?;
        graph.set_scope("loss");
        let (loss_node, loss) = graph.softmax_cross_entropy(logits, &batch.labels)?;
        graph.set_output(loss_node);
        Ok((loss, graph))
    }

    /// Inference-mode loss only.
    pub fn loss<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        batch: &Batch<T>,
        dropout: DropoutMode<'_, T>,
    ) -> Result<f64> {
        self.forward(params, batch, dropout).map(|(l, _)| l)
    }

    /// Inference-mode logits `[n, outputs]`.
    pub fn logits<T: Scalar>(&self, params: &ParamStore<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let id = self.record_logits(&mut graph, params, inputs, DropoutMode::Disabled)?;
        Ok(graph.value(id).clone())
    }

    /// Inference-mode backbone output `[n, feature_dim]`.
    pub fn features<T: Scalar>(&self, params: &ParamStore<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let id = self.record_features(&mut graph, params, inputs, DropoutMode::Disabled)?;
        Ok(graph.value(id).clone())
    }

    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, inputs: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(params, inputs)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}

fn insert_pair(params: &mut ParamStore, name: &str, weight: Tensor, outputs: usize) {
    params
        .insert(format!("{name}.weight"), weight)
        .expect("layer names validated unique");
    params
        .insert(format!("{name}.bias"), Tensor::zeros(&[outputs]))
        .expect("layer names validated unique");
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

fn sample_mask<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, rate: f32) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate as f64));
    (0..len)
        .map(|_| {
            if rng.random::<f32>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}
