//! Independent double-precision reference interpreter, written with plain
//! loops and no shared kernels, used as the oracle for gradient and loss
//! checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use prunekit::model::{LayerKind, ModelSpec};
use prunekit::network::Network;
use prunekit::Tensor;

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_f64(net: &Network) -> Params {
    net.params
        .iter()
        .map(|(k, p)| (k.clone(), p.value.data().iter().map(|v| *v as f64).collect()))
        .collect()
}

/// Activation as (channels, height, width, values[n][c][h][w]).
#[derive(Clone)]
struct Act {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

/// Mean softmax cross-entropy of `spec` under `params`, batch statistics in BN.
pub fn loss(spec: &ModelSpec, params: &Params, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = logits(spec, params, x);
    let k = spec.classes;
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn logits(spec: &ModelSpec, params: &Params, x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let p = |layer: &str, field: &str| -> &Vec<f64> {
        params
            .get(&format!("{layer}.{field}"))
            .unwrap_or_else(|| panic!("oracle: missing {layer}.{field}"))
    };
    let mut acts: BTreeMap<String, Act> = BTreeMap::new();
    let mut last = String::new();
    for layer in &spec.layers {
        let input = |i: usize| acts[&layer.inputs[i]].clone();
        let out = match &layer.kind {
            LayerKind::Input { channels, height, width } => Act {
                c: *channels,
                h: *height,
                w: *width,
                v: x.data().iter().map(|v| *v as f64).collect(),
            },
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
                gated,
            } => {
                let a = input(0);
                let (ci, co, k, s, pd) = (*in_channels, *out_channels, *kernel, *stride, *padding);
                let ho = (a.h + 2 * pd - k) / s + 1;
                let wo = (a.w + 2 * pd - k) / s + 1;
                let w = p(&layer.id, "weight");
                let mut v = vec![0.0; n * co * ho * wo];
                for b in 0..n {
                    for o in 0..co {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let mut acc = if *bias { p(&layer.id, "bias")[o] } else { 0.0 };
                                for i in 0..ci {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = (y * s + ky) as isize - pd as isize;
                                            let ix = (xx * s + kx) as isize - pd as isize;
                                            if iy < 0 || ix < 0 || iy >= a.h as isize || ix >= a.w as isize {
                                                continue;
                                            }
                                            let xv = a.v[((b * ci + i) * a.h + iy as usize) * a.w + ix as usize];
                                            acc += xv * w[((o * ci + i) * k + ky) * k + kx];
                                        }
                                    }
                                }
                                if *gated {
                                    acc *= p(&layer.id, "phi")[o];
                                }
                                v[((b * co + o) * ho + y) * wo + xx] = acc;
                            }
                        }
                    }
                }
                Act { c: co, h: ho, w: wo, v }
            }
            LayerKind::BatchNorm { channels, gated } => {
                let a = input(0);
                let plane = a.h * a.w;
                let cnt = (n * plane) as f64;
                let mut v = a.v.clone();
                for ch in 0..*channels {
                    let mut mean = 0.0;
                    for b in 0..n {
                        for i in 0..plane {
                            mean += a.v[(b * a.c + ch) * plane + i];
                        }
                    }
                    mean /= cnt;
                    let mut var = 0.0;
                    for b in 0..n {
                        for i in 0..plane {
                            let d = a.v[(b * a.c + ch) * plane + i] - mean;
                            var += d * d;
                        }
                    }
                    var /= cnt;
                    let inv = 1.0 / (var + 1e-5f32 as f64).sqrt();
                    let g = p(&layer.id, "gamma")[ch];
                    let be = p(&layer.id, "beta")[ch];
                    let phi = if *gated { p(&layer.id, "phi")[ch] } else { 1.0 };
                    for b in 0..n {
                        for i in 0..plane {
                            let idx = (b * a.c + ch) * plane + i;
                            v[idx] = phi * (g * (a.v[idx] - mean) * inv + be);
                        }
                    }
                }
                Act { v, ..a }
            }
            LayerKind::Relu => {
                let a = input(0);
                Act {
                    v: a.v.iter().map(|v| v.max(0.0)).collect(),
                    ..a
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                let a = input(0);
                let ho = (a.h - kernel) / stride + 1;
                let wo = (a.w - kernel) / stride + 1;
                let mut v = Vec::with_capacity(n * a.c * ho * wo);
                for b in 0..n {
                    for ch in 0..a.c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let mut m = f64::NEG_INFINITY;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        m = m.max(a.v[((b * a.c + ch) * a.h + y * stride + ky) * a.w + xx * stride + kx]);
                                    }
                                }
                                v.push(m);
                            }
                        }
                    }
                }
                Act { c: a.c, h: ho, w: wo, v }
            }
            LayerKind::GlobalAvgPool => {
                let a = input(0);
                let plane = a.h * a.w;
                let v = a.v.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
                Act { c: a.c, h: 1, w: 1, v }
            }
            LayerKind::Flatten => {
                let a = input(0);
                Act {
                    c: a.c * a.h * a.w,
                    h: 1,
                    w: 1,
                    v: a.v,
                }
            }
            LayerKind::Add => {
                let (a, b) = (input(0), input(1));
                Act {
                    v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
                    ..a
                }
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let a = input(0);
                let (w, bias) = (p(&layer.id, "weight"), p(&layer.id, "bias"));
                let mut v = vec![0.0; n * out_features];
                for b in 0..n {
                    for o in 0..*out_features {
                        let mut acc = bias[o];
                        for i in 0..*in_features {
                            acc += w[o * in_features + i] * a.v[b * in_features + i];
                        }
                        v[b * out_features + o] = acc;
                    }
                }
                Act {
                    c: *out_features,
                    h: 1,
                    w: 1,
                    v,
                }
            }
        };
        acts.insert(layer.id.clone(), out);
        last = layer.id.clone();
    }
    acts.remove(&last).expect("output").v
}

/// Deterministic pseudo-random values in `[lo, hi)` without pulling in the
/// crate's generators.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }
}

pub fn random_tensor(rng: &mut Lcg, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(lo, hi) as f32).collect()).unwrap()
}
