//! Forward and backward kernels for the supported operators.
//!
//! Every reduction runs in a fixed sequential order, so repeated evaluation on
//! the same inputs is bit-identical.

use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Dense products
// ---------------------------------------------------------------------------

/// Dot product with eight fixed accumulator lanes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(a[p * m + i], brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col(g: &ConvGeometry, x: &[f32], col: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    for xo in 0..ow {
                        let ix = (xo * g.stride + kj) as isize - g.padding as isize;
                        dst[y * ow + xo] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f32], dx: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * p..(row + 1) * p];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for xo in 0..ow {
                        let ix = (xo * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[iy as usize * g.width + ix as usize] += src[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &Tensor, weight: &[f32], bias: Option<&[f32]>) -> Tensor {
    let n = x.shape()[0];
    let (oh, ow) = (g.out_height(), g.out_width());
    let (patch, pos) = (g.patch(), g.positions());
    let mut out = Tensor::zeros(&[n, g.out_channels, oh, ow]);
    let mut col = vec![0.0f32; patch * pos];
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * pos;
    for s in 0..n {
        im2col(g, &x.data()[s * in_len..(s + 1) * in_len], &mut col);
        let y = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
        gemm_nn(g.out_channels, patch, pos, weight, &col, y);
        if let Some(b) = bias {
            for (o, bv) in b.iter().enumerate() {
                y[o * pos..(o + 1) * pos].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let n = x.shape()[0];
    let (patch, pos) = (g.patch(), g.positions());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * pos;
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| vec![0.0f32; g.out_channels * patch]);
    let mut db = need_bias.then(|| vec![0.0f32; g.out_channels]);
    let mut col = vec![0.0f32; patch * pos];
    let mut dcol = vec![0.0f32; patch * pos];
    for s in 0..n {
        let dys = &dy.data()[s * out_len..(s + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x.data()[s * in_len..(s + 1) * in_len], &mut col);
            gemm_nt(g.out_channels, pos, patch, dys, &col, dw);
        }
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dys[o * pos..(o + 1) * pos].iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn(patch, g.out_channels, pos, weight, dys, &mut dcol);
            col2im(g, &dcol, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// `y[n×out] = x[n×in] · wᵀ + b` with `w` stored as `[out, in]`.
pub fn linear_forward(x: &Tensor, weight: &[f32], bias: &[f32], out: usize) -> Tensor {
    let n = x.shape()[0];
    let inp = x.len() / n;
    let mut y = Tensor::zeros(&[n, out]);
    gemm_nt(n, inp, out, x.data(), weight, y.data_mut());
    for row in y.data_mut().chunks_exact_mut(out) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

pub fn linear_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Vec<f32>>, Vec<f32>) {
    let n = x.shape()[0];
    let inp = x.len() / n;
    let out = dy.shape()[1];
    let dx = need_input.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm_nn(n, out, inp, dy.data(), weight, dx.data_mut());
        dx
    });
    let dw = need_weight.then(|| {
        let mut dw = vec![0.0f32; out * inp];
        gemm_tn(out, n, inp, dy.data(), x.data(), &mut dw);
        dw
    });
    let mut db = vec![0.0f32; out];
    for row in dy.data().chunks_exact(out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Batch normalization with an optional per-channel gate
// ---------------------------------------------------------------------------

pub struct BnForward {
    pub output: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    /// Biased batch statistics, present in training mode only.
    pub batch_mean: Option<Vec<f32>>,
    pub batch_var: Option<Vec<f32>>,
}

pub struct BnParams<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub phi: Option<&'a [f32]>,
    pub eps: f32,
}

/// Normalizes with batch statistics when `running` is `None`, otherwise with
/// the supplied `(mean, var)`.
pub fn batchnorm_forward(x: &Tensor, p: &BnParams<'_>, running: Option<(&[f32], &[f32])>) -> BnForward {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let (mean, var, train) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), false),
        None => {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s += x.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = s / count;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sq += x.data()[off..off + plane]
                        .iter()
                        .map(|&v| (v as f64 - m) * (v as f64 - m))
                        .sum::<f64>();
                }
                mean[ch] = m as f32;
                var[ch] = (sq / count) as f32;
            }
            (mean, var, true)
        }
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let gate = p.phi.map_or(1.0, |phi| phi[ch]);
            let (m, is, g, be) = (mean[ch], inv_std[ch], p.gamma[ch], p.beta[ch]);
            let src = &x.data()[off..off + plane];
            let xh = &mut xhat.data_mut()[off..off + plane];
            for (d, s) in xh.iter_mut().zip(src) {
                *d = (s - m) * is;
            }
            let dst = &mut out.data_mut()[off..off + plane];
            for (d, xv) in dst.iter_mut().zip(xh.iter()) {
                *d = gate * (g * xv + be);
            }
        }
    }
    BnForward {
        output: out,
        xhat,
        inv_std,
        batch_mean: train.then_some(mean),
        batch_var: train.then_some(var),
    }
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub phi: Option<Vec<f32>>,
}

pub fn batchnorm_backward(dy: &Tensor, fwd_xhat: &Tensor, inv_std: &[f32], p: &BnParams<'_>, train: bool) -> BnGrads {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dphi = p.phi.map(|_| vec![0.0f32; c]);
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let gate = p.phi.map_or(1.0, |phi| phi[ch]);
        let (g, be) = (p.gamma[ch], p.beta[ch]);
        let (mut s_dy, mut s_dy_xh) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for (d, xh) in dy.data()[off..off + plane].iter().zip(&fwd_xhat.data()[off..off + plane]) {
                s_dy += *d as f64;
                s_dy_xh += (*d as f64) * (*xh as f64);
            }
        }
        dgamma[ch] = (gate as f64 * s_dy_xh) as f32;
        dbeta[ch] = (gate as f64 * s_dy) as f32;
        if let Some(dphi) = dphi.as_mut() {
            dphi[ch] = (g as f64 * s_dy_xh + be as f64 * s_dy) as f32;
        }
        let scale = gate * g * inv_std[ch];
        if train {
            // d/dx of the normalized value including the batch-statistic paths.
            let mean_dy = (s_dy / count) as f32;
            let mean_dy_xh = (s_dy_xh / count) as f32;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                let src = &dy.data()[off..off + plane];
                let xh = &fwd_xhat.data()[off..off + plane];
                let dst = &mut dx.data_mut()[off..off + plane];
                for ((d, dv), xv) in dst.iter_mut().zip(src).zip(xh) {
                    *d = scale * (dv - mean_dy - xv * mean_dy_xh);
                }
            }
        } else {
            for b in 0..n {
                let off = (b * c + ch) * plane;
                let src = &dy.data()[off..off + plane];
                let dst = &mut dx.data_mut()[off..off + plane];
                for (d, dv) in dst.iter_mut().zip(src) {
                    *d = scale * dv;
                }
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
        phi: dphi,
    }
}

// ---------------------------------------------------------------------------
// Activations, pooling, loss
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, out) in dx.data_mut().iter_mut().zip(y.data()) {
        if *out <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Max pooling without padding. Returns the output and the flat argmax index
/// (into the input) of every output element; ties pick the first maximum.
pub fn maxpool_forward(x: &Tensor, kernel: usize, stride: usize) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for yy in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + yy * stride * w + xx * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let i = base + (yy * stride + ki) * w + xx * stride + kj;
                        let v = x.data()[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                y.data_mut()[o] = best;
                arg[o] = best_i as u32;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (d, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i as usize] += d;
    }
    dx
}

pub fn global_avgpool_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut y = Tensor::zeros(&[n, c, 1, 1]);
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v = x.data()[i * plane..(i + 1) * plane].iter().sum::<f32>() / plane as f32;
    }
    y
}

pub fn global_avgpool_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let mut dx = Tensor::zeros(input_shape);
    for (i, chunk) in dx.data_mut().chunks_exact_mut(plane).enumerate() {
        let g = dy.data()[i] / plane as f32;
        chunk.iter_mut().for_each(|v| *v = g);
    }
    dx
}

/// Mean softmax cross-entropy. Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let mut probs = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for (i, row) in logits.data().chunks_exact(k).enumerate() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[labels[i]] as f64;
        for (p, &v) in probs.data_mut()[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = ((v as f64 - lse).exp()) as f32;
        }
    }
    ((total / n as f64) as f32, probs)
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let n = probs.shape()[0];
    let k = probs.shape()[1];
    let mut d = probs.clone();
    let inv = 1.0 / n as f32;
    for (i, row) in d.data_mut().chunks_exact_mut(k).enumerate() {
        row[labels[i]] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f32], w: &[f32]) -> Vec<f32> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut y = vec![0.0f32; g.out_channels * oh * ow];
        for o in 0..g.out_channels {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (yy * g.stride + ki) as isize - g.padding as isize;
                                let ix = (xx * g.stride + kj) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                                    continue;
                                }
                                acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((o * g.in_channels + c) * g.kernel + ki) * g.kernel + kj];
                            }
                        }
                    }
                    y[(o * oh + yy) * ow + xx] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            height: 5,
            width: 6,
        };
        let x: Vec<f32> = (0..60).map(|i| ((i * 7 % 11) as f32 - 5.0) / 3.0).collect();
        let w: Vec<f32> = (0..54).map(|i| ((i * 5 % 13) as f32 - 6.0) / 7.0).collect();
        let xt = Tensor::from_vec(&[1, 2, 5, 6], x.clone()).unwrap();
        let y = conv2d_forward(&g, &xt, &w, None);
        let expected = naive_conv(&g, &x, &w);
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c);
        // bᵀ stored as 4x3
        let bt: Vec<f32> = (0..4).flat_map(|j| (0..3).map(move |p| (p * 4 + j) as f32 * 0.5)).collect();
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c2);
        let at: Vec<f32> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f32)).collect();
        let mut c3 = vec![0.0; 8];
        gemm_tn(2, 3, 4, &at, &b, &mut c3);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let logits = Tensor::from_vec(&[1, 2], vec![50.0, -50.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]);
        assert!(loss < 1e-20);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 2.0, -1.0]).unwrap();
        let (y, arg) = maxpool_forward(&x, 2, 2);
        assert_eq!(y.data(), &[3.0]);
        let dx = maxpool_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 1, 1], 2.0));
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
