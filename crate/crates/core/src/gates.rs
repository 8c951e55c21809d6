//! Gate decoration: Gated Batch Normalization, Gated Convolution, and the
//! exact conversions between gated and vanilla modules.
//!
//! A GBN computes `φ·(γ·ẑ + β)` per channel, where `ẑ` is the normalized
//! input. Converting a BN moves `γ` into the gate (`φ := γ, β := β/γ, γ := 1`)
//! and freezes `γ`; merging folds the gate back (`γ := φ·γ, β := φ·β`).
//!
//! A gated convolution computes `φ·(X ⊗ W + b)` per filter with
//! `φ := ‖W‖_F / (c·k²)` and `W := W/φ` at conversion; merging sets `W := φ·W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BnParams, ConvGeometry};
use crate::model::LayerKind;
use crate::network::{param_name, scale_channels, DecorationManifest, Mode, Network, ParamRole, Parameter, BN_EPS};
use crate::tensor::Tensor;

/// Channels whose `|γ|` is at or below this value cannot be converted.
pub const GAMMA_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecorateMode {
    Gbn,
    GatedConv,
}

impl std::fmt::Display for DecorateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecorateMode::Gbn => "gbn",
            DecorateMode::GatedConv => "gated-conv",
        })
    }
}

impl std::str::FromStr for DecorateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gbn" => Ok(DecorateMode::Gbn),
            "gated-conv" => Ok(DecorateMode::GatedConv),
            other => Err(Error::Argument(format!("unknown decoration mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    pub phi: Vec<f32>,
    pub gamma_frozen: bool,
    pub owner: String,
}

// ---------------------------------------------------------------------------
// Standalone modules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormModule {
    pub id: String,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbnModule {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub gate: GateState,
}

fn bn_apply(x: &Tensor, gamma: &[f32], beta: &[f32], phi: Option<&[f32]>, stats: (&[f32], &[f32]), eps: f32, mode: Mode) -> Tensor {
    let p = BnParams { gamma, beta, phi, eps };
    let running = match mode {
        Mode::Train => None,
        Mode::Eval => Some(stats),
    };
    kernels::batchnorm_forward(x, &p, running).output
}

impl BatchNormModule {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Tensor {
        bn_apply(x, &self.gamma, &self.beta, None, (&self.running_mean, &self.running_var), self.eps, mode)
    }
}

impl GbnModule {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Tensor {
        bn_apply(
            x,
            &self.gamma,
            &self.beta,
            Some(&self.gate.phi),
            (&self.running_mean, &self.running_var),
            self.eps,
            mode,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvModule {
    pub id: String,
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedConvModule {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub gate: GateState,
}

fn conv_apply(x: &Tensor, weight: &Tensor, bias: Option<&[f32]>, stride: usize, padding: usize) -> Tensor {
    let (_, c, h, w) = x.dims4();
    let s = weight.shape();
    let g = ConvGeometry {
        in_channels: c,
        out_channels: s[0],
        kernel: s[2],
        stride,
        padding,
        height: h,
        width: w,
    };
    kernels::conv2d_forward(&g, x, weight.data(), bias)
}

impl ConvModule {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv_apply(x, &self.weight, self.bias.as_deref(), self.stride, self.padding)
    }
}

impl GatedConvModule {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = conv_apply(x, &self.weight, self.bias.as_deref(), self.stride, self.padding);
        scale_channels(&y, &self.gate.phi)
    }
}

// ---------------------------------------------------------------------------
// Conversions
// ---------------------------------------------------------------------------

pub fn bn_to_gbn(bn: &BatchNormModule) -> Result<GbnModule> {
    let bad: Vec<usize> = bn
        .gamma
        .iter()
        .enumerate()
        .filter(|(_, g)| g.abs() <= GAMMA_FLOOR)
        .map(|(c, _)| c)
        .collect();
    if !bad.is_empty() {
        return Err(Error::DegenerateGamma {
            layer: bn.id.clone(),
            floor: GAMMA_FLOOR,
            channels: bad,
        });
    }
    Ok(GbnModule {
        gamma: vec![1.0; bn.gamma.len()],
        beta: bn.beta.iter().zip(&bn.gamma).map(|(b, g)| b / g).collect(),
        running_mean: bn.running_mean.clone(),
        running_var: bn.running_var.clone(),
        eps: bn.eps,
        gate: GateState {
            phi: bn.gamma.clone(),
            gamma_frozen: true,
            owner: bn.id.clone(),
        },
    })
}

pub fn gbn_to_bn(gbn: &GbnModule) -> BatchNormModule {
    let phi = &gbn.gate.phi;
    BatchNormModule {
        id: gbn.gate.owner.clone(),
        gamma: gbn.gamma.iter().zip(phi).map(|(g, p)| p * g).collect(),
        beta: gbn.beta.iter().zip(phi).map(|(b, p)| b * p).collect(),
        running_mean: gbn.running_mean.clone(),
        running_var: gbn.running_var.clone(),
        eps: gbn.eps,
    }
}

/// Frobenius norm of every output filter.
fn filter_norms(weight: &Tensor) -> Vec<f32> {
    let out = weight.shape()[0];
    let per = weight.len() / out;
    weight
        .data()
        .chunks_exact(per)
        .map(|f| f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32)
        .collect()
}

pub fn conv_to_gated(conv: &ConvModule) -> Result<GatedConvModule> {
    let s = conv.weight.shape();
    let (c, k) = (s[1], s[2]);
    let norms = filter_norms(&conv.weight);
    let bad: Vec<usize> = norms.iter().enumerate().filter(|(_, n)| **n <= 0.0).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        return Err(Error::DegenerateFilter {
            layer: conv.id.clone(),
            filters: bad,
        });
    }
    let phi: Vec<f32> = norms.iter().map(|n| n / (c * k * k) as f32).collect();
    let per = conv.weight.len() / s[0];
    let mut weight = conv.weight.clone();
    for (f, p) in weight.data_mut().chunks_exact_mut(per).zip(&phi) {
        f.iter_mut().for_each(|v| *v /= p);
    }
    let bias = conv.bias.as_ref().map(|b| b.iter().zip(&phi).map(|(b, p)| b / p).collect());
    Ok(GatedConvModule {
        weight,
        bias,
        stride: conv.stride,
        padding: conv.padding,
        gate: GateState {
            phi,
            gamma_frozen: false,
            owner: conv.id.clone(),
        },
    })
}

pub fn gated_to_conv(gated: &GatedConvModule) -> ConvModule {
    let per = gated.weight.len() / gated.weight.shape()[0];
    let mut weight = gated.weight.clone();
    for (f, p) in weight.data_mut().chunks_exact_mut(per).zip(&gated.gate.phi) {
        f.iter_mut().for_each(|v| *v *= p);
    }
    let bias = gated
        .bias
        .as_ref()
        .map(|b| b.iter().zip(&gated.gate.phi).map(|(b, p)| b * p).collect());
    ConvModule {
        id: gated.gate.owner.clone(),
        weight,
        bias,
        stride: gated.stride,
        padding: gated.padding,
    }
}

// ---------------------------------------------------------------------------
// Network-level decoration
// ---------------------------------------------------------------------------

fn values(net: &Network, layer: &str, field: &str) -> Vec<f32> {
    net.param(layer, field)
        .unwrap_or_else(|| panic!("missing {layer}.{field}"))
        .value
        .data()
        .to_vec()
}

fn set_values(net: &mut Network, layer: &str, field: &str, data: Vec<f32>, role: ParamRole) {
    let name = param_name(layer, field);
    match net.params.get_mut(&name) {
        Some(p) => {
            let shape = p.value.shape().to_vec();
            p.set_value(Tensor::from_vec(&shape, data).expect("same length"));
        }
        None => {
            let len = data.len();
            net.params
                .insert(name, Parameter::new(Tensor::from_vec(&[len], data).expect("1-d"), role));
        }
    }
}

pub fn extract_bn(net: &Network, id: &str) -> BatchNormModule {
    BatchNormModule {
        id: id.to_string(),
        gamma: values(net, id, "gamma"),
        beta: values(net, id, "beta"),
        running_mean: net.buffers[&param_name(id, "running_mean")].data().to_vec(),
        running_var: net.buffers[&param_name(id, "running_var")].data().to_vec(),
        eps: BN_EPS,
    }
}

pub fn extract_conv(net: &Network, id: &str) -> ConvModule {
    let layer = net.spec.layer(id).expect("known layer");
    let LayerKind::Conv2d { stride, padding, bias, .. } = layer.kind else {
        panic!("`{id}` is not a convolution");
    };
    ConvModule {
        id: id.to_string(),
        weight: net.param(id, "weight").expect("conv weight").value.clone(),
        bias: bias.then(|| values(net, id, "bias")),
        stride,
        padding,
    }
}

fn set_gated_flag(net: &mut Network, id: &str, on: bool) {
    let i = net.spec.index_of(id).expect("known layer");
    match &mut net.spec.layers[i].kind {
        LayerKind::Conv2d { gated, .. } | LayerKind::BatchNorm { gated, .. } => *gated = on,
        _ => unreachable!("only conv and bn layers carry gates"),
    }
}

/// Layers eligible (and ineligible) for decoration in `mode`.
fn eligibility(net: &Network, mode: DecorateMode) -> (Vec<String>, Vec<String>) {
    let consumers = net.spec.consumers();
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, layer) in net.spec.layers.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::Conv2d { .. }) {
            continue;
        }
        let bn_next = match consumers[i].as_slice() {
            [j] => matches!(net.spec.layers[*j].kind, LayerKind::BatchNorm { .. }).then_some(*j),
            _ => None,
        };
        match (mode, bn_next) {
            (DecorateMode::Gbn, Some(j)) => ok.push(net.spec.layers[j].id.clone()),
            (DecorateMode::Gbn, None) => bad.push(layer.id.clone()),
            (DecorateMode::GatedConv, None) => ok.push(layer.id.clone()),
            (DecorateMode::GatedConv, Some(_)) => bad.push(layer.id.clone()),
        }
    }
    (ok, bad)
}

/// Picks GBN decoration when every conv is followed by BN, gated convolution
/// when none is.
pub fn infer_mode(net: &Network) -> Result<DecorateMode> {
    let (_, bad_gbn) = eligibility(net, DecorateMode::Gbn);
    if bad_gbn.is_empty() {
        return Ok(DecorateMode::Gbn);
    }
    let (_, bad_conv) = eligibility(net, DecorateMode::GatedConv);
    if bad_conv.is_empty() {
        return Ok(DecorateMode::GatedConv);
    }
    Err(Error::Ineligible {
        mode: "mixed".into(),
        layers: bad_gbn,
    })
}

/// Converts every eligible module to its gated form and records the
/// decoration manifest on the network.
pub fn decorate_model(net: &mut Network, mode: DecorateMode) -> Result<DecorationManifest> {
    if net.decoration.is_some() || !net.gated_layers().is_empty() {
        return Err(Error::State("network is already decorated".into()));
    }
    let (targets, bad) = eligibility(net, mode);
    if !bad.is_empty() {
        return Err(Error::Ineligible {
            mode: mode.to_string(),
            layers: bad,
        });
    }
    // Validate everything before mutating anything.
    let mut converted_bn = Vec::new();
    let mut converted_conv = Vec::new();
    for id in &targets {
        match mode {
            DecorateMode::Gbn => converted_bn.push(bn_to_gbn(&extract_bn(net, id))?),
            DecorateMode::GatedConv => converted_conv.push(conv_to_gated(&extract_conv(net, id))?),
        }
    }
    for gbn in converted_bn {
        let id = gbn.gate.owner.clone();
        set_values(net, &id, "gamma", gbn.gamma, ParamRole::Gamma);
        set_values(net, &id, "beta", gbn.beta, ParamRole::Beta);
        set_values(net, &id, "phi", gbn.gate.phi, ParamRole::Gate);
        net.param_mut(&id, "gamma").expect("gamma").updatable = false;
        set_gated_flag(net, &id, true);
    }
    for gc in converted_conv {
        let id = gc.gate.owner.clone();
        net.param_mut(&id, "weight").expect("weight").set_value(gc.weight);
        if let Some(b) = gc.bias {
            set_values(net, &id, "bias", b, ParamRole::Bias);
        }
        set_values(net, &id, "phi", gc.gate.phi, ParamRole::Gate);
        set_gated_flag(net, &id, true);
    }
    let manifest = DecorationManifest {
        mode,
        modules: targets,
        gamma_frozen: mode == DecorateMode::Gbn,
    };
    net.decoration = Some(manifest.clone());
    Ok(manifest)
}

/// Merges every gate back into its module; the result holds no gate state.
pub fn undecorate_model(net: &mut Network) -> Result<()> {
    let Some(manifest) = net.decoration.take() else {
        return Err(Error::State("network is not decorated".into()));
    };
    for id in &manifest.modules {
        match manifest.mode {
            DecorateMode::Gbn => {
                let phi = values(net, id, "phi");
                let gbn = GbnModule {
                    gate: GateState {
                        phi,
                        gamma_frozen: manifest.gamma_frozen,
                        owner: id.clone(),
                    },
                    ..gbn_view(net, id)
                };
                let bn = gbn_to_bn(&gbn);
                set_values(net, id, "gamma", bn.gamma, ParamRole::Gamma);
                set_values(net, id, "beta", bn.beta, ParamRole::Beta);
            }
            DecorateMode::GatedConv => {
                let conv = extract_conv(net, id);
                let gated = GatedConvModule {
                    weight: conv.weight,
                    bias: conv.bias,
                    stride: conv.stride,
                    padding: conv.padding,
                    gate: GateState {
                        phi: values(net, id, "phi"),
                        gamma_frozen: false,
                        owner: id.clone(),
                    },
                };
                let plain = gated_to_conv(&gated);
                net.param_mut(id, "weight").expect("weight").set_value(plain.weight);
                if let Some(b) = plain.bias {
                    set_values(net, id, "bias", b, ParamRole::Bias);
                }
            }
        }
        net.params.remove(&param_name(id, "phi"));
        set_gated_flag(net, id, false);
    }
    net.set_all_updatable(true);
    Ok(())
}

fn gbn_view(net: &Network, id: &str) -> GbnModule {
    let bn = extract_bn(net, id);
    GbnModule {
        gamma: bn.gamma,
        beta: bn.beta,
        running_mean: bn.running_mean,
        running_var: bn.running_var,
        eps: bn.eps,
        gate: GateState {
            phi: Vec::new(),
            gamma_frozen: true,
            owner: id.to_string(),
        },
    }
}

/// Current gate of a decorated layer.
pub fn gate_state(net: &Network, id: &str) -> Option<GateState> {
    let phi = net.param(id, "phi")?.value.data().to_vec();
    let gamma_frozen = net.param(id, "gamma").map(|g| !g.updatable).unwrap_or(false);
    Some(GateState {
        phi,
        gamma_frozen,
        owner: id.to_string(),
    })
}

/// Sum of `|φ|` over every gate, and the gate count.
pub fn gate_l1(net: &Network) -> (f64, usize) {
    net.params
        .values()
        .filter(|p| p.role == ParamRole::Gate)
        .fold((0.0, 0), |(s, n), p| {
            (s + p.value.data().iter().map(|v| v.abs() as f64).sum::<f64>(), n + p.value.len())
        })
}
