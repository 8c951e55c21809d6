//! Parameters, network execution and reverse-mode differentiation.
//!
//! A [`Network`] pairs a [`ModelSpec`] with its parameters. [`Network::forward`]
//! evaluates every layer in topological order and returns a [`ForwardCache`];
//! [`Network::backward`] walks the same layers in reverse, accumulating the
//! upstream gradient of every node from all of its consumers before
//! propagating it further.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BnParams, ConvGeometry};
use crate::model::{ActShape, LayerKind, ModelSpec};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    Gate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub role: ParamRole,
    /// Optimizer steps only touch updatable parameters.
    pub updatable: bool,
    /// Gradient computed during backward even when not updatable.
    pub observe_grad: bool,
    grad_valid: bool,
}

impl Parameter {
    pub fn new(value: Tensor, role: ParamRole) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            role,
            updatable: true,
            observe_grad: false,
            grad_valid: false,
        }
    }

    pub fn needs_grad(&self) -> bool {
        self.updatable || self.observe_grad
    }

    /// True once a backward pass has written this parameter's gradient.
    pub fn grad_valid(&self) -> bool {
        self.grad_valid
    }

    pub fn set_value(&mut self, value: Tensor) {
        self.grad = Tensor::zeros(value.shape());
        self.value = value;
        self.grad_valid = false;
    }
}

pub type ParamStore = BTreeMap<String, Parameter>;

pub fn param_name(layer: &str, field: &str) -> String {
    format!("{layer}.{field}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN.
    Train,
    /// Running statistics in BN.
    Eval,
}

/// Records which modules carry gates so they can be merged back later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecorationManifest {
    pub mode: crate::gates::DecorateMode,
    pub modules: Vec<String>,
    pub gamma_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub params: ParamStore,
    /// Non-trainable state (BN running statistics).
    pub buffers: BTreeMap<String, Tensor>,
    pub decoration: Option<DecorationManifest>,
}

enum Aux {
    None,
    Bn {
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_stats: Option<(Vec<f32>, Vec<f32>)>,
    },
    GatedConv {
        pre_gate: Tensor,
    },
    MaxPool {
        argmax: Vec<u32>,
    },
}

pub struct ForwardCache {
    mode: Mode,
    shapes: Vec<ActShape>,
    activations: Vec<Tensor>,
    aux: Vec<Aux>,
    probs: Tensor,
    labels: Vec<usize>,
    pub loss: f32,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("non-empty network")
    }

    pub fn activation(&self, index: usize) -> &Tensor {
        &self.activations[index]
    }

    /// Top-1 predictions.
    pub fn predictions(&self) -> Vec<usize> {
        let k = self.probs.shape()[1];
        self.logits()
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

impl Network {
    /// Creates a network with Kaiming fan-in initialization from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = BTreeMap::new();
        for layer in &spec.layers {
            match &layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    gated,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let shape = [*out_channels, *in_channels, *kernel, *kernel];
                    let w = normal(&mut rng, &shape, (2.0 / fan_in as f32).sqrt());
                    params.insert(param_name(&layer.id, "weight"), Parameter::new(w, ParamRole::Weight));
                    if *bias {
                        params.insert(
                            param_name(&layer.id, "bias"),
                            Parameter::new(Tensor::zeros(&[*out_channels]), ParamRole::Bias),
                        );
                    }
                    if *gated {
                        params.insert(
                            param_name(&layer.id, "phi"),
                            Parameter::new(Tensor::full(&[*out_channels], 1.0), ParamRole::Gate),
                        );
                    }
                }
                LayerKind::BatchNorm { channels, gated } => {
                    let c = *channels;
                    params.insert(param_name(&layer.id, "gamma"), Parameter::new(Tensor::full(&[c], 1.0), ParamRole::Gamma));
                    params.insert(param_name(&layer.id, "beta"), Parameter::new(Tensor::zeros(&[c]), ParamRole::Beta));
                    if *gated {
                        params.insert(param_name(&layer.id, "phi"), Parameter::new(Tensor::full(&[c], 1.0), ParamRole::Gate));
                    }
                    buffers.insert(param_name(&layer.id, "running_mean"), Tensor::zeros(&[c]));
                    buffers.insert(param_name(&layer.id, "running_var"), Tensor::full(&[c], 1.0));
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let w = normal(&mut rng, &[*out_features, *in_features], (1.0 / *in_features as f32).sqrt());
                    params.insert(param_name(&layer.id, "weight"), Parameter::new(w, ParamRole::Weight));
                    params.insert(
                        param_name(&layer.id, "bias"),
                        Parameter::new(Tensor::zeros(&[*out_features]), ParamRole::Bias),
                    );
                }
                _ => {}
            }
        }
        Ok(Network {
            spec,
            params,
            buffers,
            decoration: None,
        })
    }

    pub fn param(&self, layer: &str, field: &str) -> Option<&Parameter> {
        self.params.get(&param_name(layer, field))
    }

    pub fn param_mut(&mut self, layer: &str, field: &str) -> Option<&mut Parameter> {
        self.params.get_mut(&param_name(layer, field))
    }

    fn value(&self, layer: &str, field: &str) -> &[f32] {
        self.params
            .get(&param_name(layer, field))
            .unwrap_or_else(|| panic!("missing parameter {layer}.{field}"))
            .value
            .data()
    }

    fn opt_value(&self, layer: &str, field: &str) -> Option<&[f32]> {
        self.params.get(&param_name(layer, field)).map(|p| p.value.data())
    }

    fn buffer(&self, layer: &str, field: &str) -> &[f32] {
        self.buffers
            .get(&param_name(layer, field))
            .unwrap_or_else(|| panic!("missing buffer {layer}.{field}"))
            .data()
    }

    /// Sets the updatable flag of every parameter.
    pub fn set_all_updatable(&mut self, updatable: bool) {
        self.params.values_mut().for_each(|p| p.updatable = updatable);
    }

    /// Total number of stored scalar parameters (excluding buffers).
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Evaluates the network and the mean softmax cross-entropy loss.
    pub fn forward(&self, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<ForwardCache> {
        let shapes = self.spec.validate()?;
        let n = batch.shape().first().copied().unwrap_or(0);
        let expected = shapes[0].batch_shape(n);
        if batch.shape() != expected.as_slice() || n == 0 {
            return Err(Error::shape(
                &self.spec.layers[0].id,
                format!("batch shape {:?} does not match {:?}", batch.shape(), expected),
            ));
        }
        if labels.len() != n {
            return Err(Error::shape(
                &self.spec.layers[0].id,
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.spec.classes) {
            return Err(Error::shape(
                &self.spec.layers[0].id,
                format!("label {bad} out of range for {} classes", self.spec.classes),
            ));
        }

        let inputs = self.spec.input_indices();
        let mut acts: Vec<Tensor> = Vec::with_capacity(shapes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(shapes.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let id = layer.id.as_str();
            let (out, a) = match &layer.kind {
                LayerKind::Input { .. } => (batch.clone(), Aux::None),
                LayerKind::Conv2d {
                    bias, gated, ..
                } => {
                    let x = &acts[inputs[i][0]];
                    let g = self.geometry(i, &shapes);
                    let b = bias.then(|| self.value(id, "bias"));
                    let y = kernels::conv2d_forward(&g, x, self.value(id, "weight"), b);
                    if *gated {
                        let gated_out = scale_channels(&y, self.value(id, "phi"));
                        (gated_out, Aux::GatedConv { pre_gate: y })
                    } else {
                        (y, Aux::None)
                    }
                }
                LayerKind::BatchNorm { gated, .. } => {
                    let x = &acts[inputs[i][0]];
                    let p = BnParams {
                        gamma: self.value(id, "gamma"),
                        beta: self.value(id, "beta"),
                        phi: if *gated { Some(self.value(id, "phi")) } else { None },
                        eps: BN_EPS,
                    };
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((self.buffer(id, "running_mean"), self.buffer(id, "running_var"))),
                    };
                    let f = kernels::batchnorm_forward(x, &p, running);
                    let batch_stats = f.batch_mean.zip(f.batch_var);
                    (
                        f.output,
                        Aux::Bn {
                            xhat: f.xhat,
                            inv_std: f.inv_std,
                            batch_stats,
                        },
                    )
                }
                LayerKind::Relu => (kernels::relu_forward(&acts[inputs[i][0]]), Aux::None),
                LayerKind::MaxPool { kernel, stride } => {
                    let (y, argmax) = kernels::maxpool_forward(&acts[inputs[i][0]], *kernel, *stride);
                    (y, Aux::MaxPool { argmax })
                }
                LayerKind::GlobalAvgPool => (kernels::global_avgpool_forward(&acts[inputs[i][0]]), Aux::None),
                LayerKind::Flatten => {
                    let x = acts[inputs[i][0]].clone();
                    (x.reshape(&shapes[i].batch_shape(n))?, Aux::None)
                }
                LayerKind::Add => {
                    let (a, b) = (&acts[inputs[i][0]], &acts[inputs[i][1]]);
                    if a.shape() != b.shape() {
                        return Err(Error::shape(
                            id,
                            format!("add operands {:?} and {:?}", a.shape(), b.shape()),
                        ));
                    }
                    let mut y = a.clone();
                    y.add_assign(b);
                    (y, Aux::None)
                }
                LayerKind::Linear { out_features, .. } => {
                    let y = kernels::linear_forward(
                        &acts[inputs[i][0]],
                        self.value(id, "weight"),
                        self.value(id, "bias"),
                        *out_features,
                    );
                    (y, Aux::None)
                }
            };
            acts.push(out);
            aux.push(a);
        }
        let logits = acts.last().expect("non-empty");
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let (loss, probs) = kernels::softmax_cross_entropy(logits, labels);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        Ok(ForwardCache {
            mode,
            shapes,
            activations: acts,
            aux,
            probs,
            labels: labels.to_vec(),
            loss,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the BN running
    /// averages (momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, aux) in self.spec.layers.iter().zip(&cache.aux) {
            if let Aux::Bn {
                batch_stats: Some((mean, var)),
                ..
            } = aux
            {
                for (field, stat) in [("running_mean", mean), ("running_var", var)] {
                    let buf = self
                        .buffers
                        .get_mut(&param_name(&layer.id, field))
                        .expect("bn buffers present");
                    for (r, s) in buf.data_mut().iter_mut().zip(stat) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                    }
                }
            }
        }
    }

    /// Writes `∂loss/∂p` into every parameter that needs a gradient. Other
    /// parameters have their gradients cleared.
    pub fn backward(&mut self, cache: &ForwardCache) -> Result<()> {
        let shapes = self.spec.validate()?;
        if shapes != cache.shapes {
            return Err(Error::State(
                "forward cache was produced by a different network structure".into(),
            ));
        }
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
            p.grad_valid = false;
        }
        let inputs = self.spec.input_indices();
        let nl = self.spec.layers.len();
        let mut grads: Vec<Option<Tensor>> = (0..nl).map(|_| None).collect();
        grads[nl - 1] = Some(kernels::softmax_cross_entropy_backward(&cache.probs, &cache.labels));
        let train = cache.mode == Mode::Train;

        // Nodes whose input gradient is needed: anything downstream of a parameter.
        let mut upstream_params = vec![false; nl];
        for i in 0..nl {
            let own = matches!(
                self.spec.layers[i].kind,
                LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. } | LayerKind::Linear { .. }
            );
            upstream_params[i] = own || inputs[i].iter().any(|&j| upstream_params[j]);
        }

        let mut writes: Vec<(String, Vec<f32>)> = Vec::new();
        for i in (1..nl).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let layer = &self.spec.layers[i];
            let id = layer.id.as_str();
            let need_in = |j: usize| upstream_params[j];
            let mut input_grads: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            match &layer.kind {
                LayerKind::Input { .. } => unreachable!("input is layer 0"),
                LayerKind::Conv2d { bias, gated, .. } => {
                    let src = inputs[i][0];
                    let x = &cache.activations[src];
                    let mut dz = dy;
                    if *gated {
                        let Aux::GatedConv { pre_gate } = &cache.aux[i] else {
                            return Err(Error::State(format!("missing gate cache for `{id}`")));
                        };
                        writes.push((param_name(id, "phi"), channel_dot(&dz, pre_gate)));
                        dz = scale_channels(&dz, self.value(id, "phi"));
                    }
                    let g = self.geometry(i, &shapes);
                    let need_w = self.params[&param_name(id, "weight")].needs_grad();
                    let r = kernels::conv2d_backward(&g, x, self.value(id, "weight"), &dz, need_in(src), need_w, *bias);
                    if let Some(dw) = r.weight {
                        writes.push((param_name(id, "weight"), dw));
                    }
                    if let Some(db) = r.bias {
                        writes.push((param_name(id, "bias"), db));
                    }
                    if let Some(dx) = r.input {
                        input_grads.push((src, dx));
                    }
                }
                LayerKind::BatchNorm { gated, .. } => {
                    let Aux::Bn { xhat, inv_std, .. } = &cache.aux[i] else {
                        return Err(Error::State(format!("missing bn cache for `{id}`")));
                    };
                    let p = BnParams {
                        gamma: self.value(id, "gamma"),
                        beta: self.value(id, "beta"),
                        phi: if *gated { Some(self.value(id, "phi")) } else { None },
                        eps: BN_EPS,
                    };
                    let r = kernels::batchnorm_backward(&dy, xhat, inv_std, &p, train);
                    writes.push((param_name(id, "gamma"), r.gamma));
                    writes.push((param_name(id, "beta"), r.beta));
                    if let Some(dphi) = r.phi {
                        writes.push((param_name(id, "phi"), dphi));
                    }
                    input_grads.push((inputs[i][0], r.input));
                }
                LayerKind::Relu => {
                    input_grads.push((inputs[i][0], kernels::relu_backward(&cache.activations[i], &dy)));
                }
                LayerKind::MaxPool { .. } => {
                    let Aux::MaxPool { argmax } = &cache.aux[i] else {
                        return Err(Error::State(format!("missing pool cache for `{id}`")));
                    };
                    let src = inputs[i][0];
                    let dx = kernels::maxpool_backward(cache.activations[src].shape(), argmax, &dy);
                    input_grads.push((src, dx));
                }
                LayerKind::GlobalAvgPool => {
                    let src = inputs[i][0];
                    input_grads.push((src, kernels::global_avgpool_backward(cache.activations[src].shape(), &dy)));
                }
                LayerKind::Flatten => {
                    let src = inputs[i][0];
                    input_grads.push((src, dy.reshape(cache.activations[src].shape())?));
                }
                LayerKind::Add => {
                    input_grads.push((inputs[i][0], dy.clone()));
                    input_grads.push((inputs[i][1], dy));
                }
                LayerKind::Linear { .. } => {
                    let src = inputs[i][0];
                    let need_w = self.params[&param_name(id, "weight")].needs_grad();
                    let (dx, dw, db) = kernels::linear_backward(
                        &cache.activations[src],
                        self.value(id, "weight"),
                        &dy,
                        need_in(src),
                        need_w,
                    );
                    if let Some(dw) = dw {
                        writes.push((param_name(id, "weight"), dw));
                    }
                    writes.push((param_name(id, "bias"), db));
                    if let Some(dx) = dx {
                        input_grads.push((src, dx));
                    }
                }
            }
            for (j, g) in input_grads {
                if j == 0 || !need_in(j) {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        for (name, g) in writes {
            let p = self.params.get_mut(&name).expect("gradient for known parameter");
            if !p.needs_grad() {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
            p.grad.data_mut().copy_from_slice(&g);
            p.grad_valid = true;
        }
        Ok(())
    }

    pub(crate) fn geometry(&self, index: usize, shapes: &[ActShape]) -> ConvGeometry {
        let layer = &self.spec.layers[index];
        let LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } = layer.kind
        else {
            panic!("`{}` is not a convolution", layer.id)
        };
        let src = self.spec.index_of(&layer.inputs[0]).expect("validated");
        ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            height: shapes[src].height,
            width: shapes[src].width,
        }
    }

    /// Loss-only evaluation convenience.
    pub fn loss(&self, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<f32> {
        Ok(self.forward(batch, labels, mode)?.loss)
    }

    /// Gated layer ids in network order.
    pub fn gated_layers(&self) -> Vec<String> {
        self.spec
            .layers
            .iter()
            .filter(|l| l.kind.is_gated())
            .map(|l| l.id.clone())
            .collect()
    }

    pub fn opt_param_value(&self, layer: &str, field: &str) -> Option<&[f32]> {
        self.opt_value(layer, field)
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Multiplies channel `c` of an NCHW tensor by `scale[c]`.
pub(crate) fn scale_channels(x: &Tensor, scale: &[f32]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut y = x.clone();
    for b in 0..n {
        for (ch, s) in scale.iter().enumerate().take(c) {
            let off = (b * c + ch) * plane;
            y.data_mut()[off..off + plane].iter_mut().for_each(|v| *v *= s);
        }
    }
    y
}

/// Per-channel `Σ a·b` over batch and spatial positions.
fn channel_dot(a: &Tensor, b: &Tensor) -> Vec<f32> {
    let (n, c, h, w) = a.dims4();
    let plane = h * w;
    let mut out = vec![0.0f64; c];
    for bi in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let off = (bi * c + ch) * plane;
            for (x, y) in a.data()[off..off + plane].iter().zip(&b.data()[off..off + plane]) {
                *acc += (*x as f64) * (*y as f64);
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_plain_cnn, LayerSpec, PlainCnnOptions};

    fn linear_only(inp: usize, out: usize) -> ModelSpec {
        ModelSpec {
            architecture: crate::model::Architecture::Plain,
            input_shape: [inp, 1, 1],
            classes: out,
            layers: vec![
                LayerSpec::new(
                    "input",
                    LayerKind::Input {
                        channels: inp,
                        height: 1,
                        width: 1,
                    },
                    &[],
                ),
                LayerSpec::new("flatten", LayerKind::Flatten, &["input"]),
                LayerSpec::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: inp,
                        out_features: out,
                    },
                    &["flatten"],
                ),
            ],
        }
    }

    #[test]
    fn zero_logits_loss_is_ln2() {
        let mut net = Network::new(linear_only(3, 2), 1).unwrap();
        net.param_mut("fc", "weight").unwrap().value.fill(0.0);
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![0.3, -1.0, 2.0]).unwrap();
        let cache = net.forward(&x, &[1], Mode::Train).unwrap();
        assert!((cache.loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        // With loss gradient g on the logits, dW = g ⊗ x.
        let mut net = Network::new(linear_only(3, 2), 1).unwrap();
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![0.5, -1.5, 2.0]).unwrap();
        let cache = net.forward(&x, &[0], Mode::Train).unwrap();
        net.backward(&cache).unwrap();
        let p = &cache.probs;
        let g = [p.data()[0] - 1.0, p.data()[1]];
        let dw = net.param("fc", "weight").unwrap().grad.data().to_vec();
        for o in 0..2 {
            for k in 0..3 {
                assert!((dw[o * 3 + k] - g[o] * x.data()[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut net = Network::new(linear_only(3, 2), 1).unwrap();
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let cache = net.forward(&x, &[0], Mode::Train).unwrap();
        net.backward(&cache).unwrap();
        let dw = net.param("fc", "weight").unwrap().grad.data().to_vec();
        assert_eq!(dw[0], 0.0);
        assert_eq!(dw[2], 0.0);
        assert_eq!(dw[3], 0.0);
        assert_eq!(dw[5], 0.0);
    }

    #[test]
    fn bad_batch_shape_names_input() {
        let net = Network::new(linear_only(3, 2), 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 1, 1]);
        match net.forward(&x, &[0], Mode::Train) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, "input"),
            other => panic!("unexpected {other:?}", other = other.map(|c| c.loss)),
        }
        let x = Tensor::zeros(&[2, 3, 1, 1]);
        assert!(net.forward(&x, &[0], Mode::Train).is_err());
    }

    #[test]
    fn stale_cache_is_a_state_error() {
        let spec = build_plain_cnn(&[4, 4], [1, 8, 8], 2, &PlainCnnOptions::default()).unwrap();
        let net = Network::new(spec.clone(), 3).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.5);
        let cache = net.forward(&x, &[0, 1], Mode::Train).unwrap();
        let other = build_plain_cnn(&[4, 5], [1, 8, 8], 2, &PlainCnnOptions::default()).unwrap();
        let mut net2 = Network::new(other, 3).unwrap();
        assert!(matches!(net2.backward(&cache), Err(Error::State(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = build_plain_cnn(&[4, 6], [1, 8, 8], 3, &PlainCnnOptions::default()).unwrap();
        let mut net = Network::new(spec, 9).unwrap();
        let x = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let c1 = net.forward(&x, &[0, 2], Mode::Train).unwrap();
        net.backward(&c1).unwrap();
        let g1: Vec<_> = net.params.values().map(|p| p.grad.clone()).collect();
        let c2 = net.forward(&x, &[0, 2], Mode::Train).unwrap();
        net.backward(&c2).unwrap();
        let g2: Vec<_> = net.params.values().map(|p| p.grad.clone()).collect();
        assert_eq!(c1.loss.to_bits(), c2.loss.to_bits());
        assert_eq!(g1, g2);
    }
}
