//! Forward and backward kernels. Each forward kernel reports how much work it
//! did: `macs` counts multiply-accumulates (convolutions only) and `other`
//! counts every remaining elementwise op, compare or activation.

use super::{sigmoid, Tensor4, TensorError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub macs: u64,
    pub other: u64,
}

fn mismatch(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

/// Output positions `o` in `0..out` with `0 <= o * stride + tap - pad < input`.
fn valid_range(tap: usize, pad: usize, stride: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if input + pad > tap { ((input - 1 + pad - tap) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

pub fn conv_output_side(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (input + 2 * pad - kernel) / stride + 1
}

/// Zero-padded ("same" for stride 1) grouped convolution.
/// `w` has shape `[cout, cin / groups, k, k]`.
pub fn conv2d(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[f64]>,
    stride: usize,
    groups: usize,
) -> Result<(Tensor4, OpCount), TensorError> {
    let [n, cin, h, wd] = x.shape();
    let [cout, cin_g, k, k2] = w.shape();
    if k != k2 || groups == 0 || cin != cin_g * groups || cout % groups != 0 {
        return Err(mismatch(format!("conv input {:?} with weight {:?}, groups {groups}", x.shape(), w.shape())));
    }
    if bias.is_some_and(|b| b.len() != cout) {
        return Err(mismatch("bias length".into()));
    }
    let pad = k / 2;
    let (ho, wo) = (conv_output_side(h, k, stride), conv_output_side(wd, k, stride));
    let cout_g = cout / groups;
    let mut out = Tensor4::zeros([n, cout, ho, wo]);
    let mut count = OpCount::default();
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            let oplane = &mut od[(b * cout + co) * ho * wo..][..ho * wo];
            if let Some(bias) = bias {
                oplane.fill(bias[co]);
                count.other += (ho * wo) as u64;
            }
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let iplane = &xd[(b * cin + ci) * h * wd..][..h * wd];
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(ky, pad, stride, h, ho);
                    for kx in 0..k {
                        count.macs += (ho * wo) as u64;
                        let wv = wdat[((co * cin_g + cig) * k + ky) * k + kx];
                        let (xlo, xhi) = valid_range(kx, pad, stride, wd, wo);
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            let irow = &iplane[iy * wd..][..wd];
                            let orow = &mut oplane[oy * wo..][..wo];
                            if stride == 1 {
                                let src = &irow[xlo + kx - pad..xhi + kx - pad];
                                for (o, i) in orow[xlo..xhi].iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    orow[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, count))
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    grad: &Tensor4,
    stride: usize,
    groups: usize,
) -> (Tensor4, Tensor4, Vec<f64>) {
    let [n, cin, h, wd] = x.shape();
    let [cout, cin_g, k, _] = w.shape();
    let [_, _, ho, wo] = grad.shape();
    let pad = k / 2;
    let cout_g = cout / groups;
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    let mut db = vec![0.0; cout];
    let xd = x.data();
    let wdat = w.data();
    let gd = grad.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            let gplane = &gd[(b * cout + co) * ho * wo..][..ho * wo];
            db[co] += gplane.iter().sum::<f64>();
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let base = (b * cin + ci) * h * wd;
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(ky, pad, stride, h, ho);
                    for kx in 0..k {
                        let widx = ((co * cin_g + cig) * k + ky) * k + kx;
                        let wv = wdat[widx];
                        let (xlo, xhi) = valid_range(kx, pad, stride, wd, wo);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * wo..][..wo];
                            let row = base + iy * wd;
                            if stride == 1 {
                                let (start, end) = (row + xlo + kx - pad, row + xhi + kx - pad);
                                for (gv, xv) in grow[xlo..xhi].iter().zip(&xd[start..end]) {
                                    acc += gv * xv;
                                }
                                for (d, gv) in dxd[start..end].iter_mut().zip(&grow[xlo..xhi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = row + ox * stride + kx - pad;
                                    acc += grow[ox] * xd[ix];
                                    dxd[ix] += wv * grow[ox];
                                }
                            }
                        }
                        dwd[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn relu(x: &Tensor4) -> (Tensor4, OpCount) {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    (out, OpCount { macs: 0, other: x.len() as u64 })
}

/// Gradient is zero wherever the input was not strictly positive.
pub fn relu_backward(x: &Tensor4, grad: &Tensor4) -> Tensor4 {
    let mut dx = grad.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Batch-norm intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
}

fn channel_iter(shape: [usize; 4], c: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let [n, ch, h, w] = shape;
    (0..n).map(move |b| {
        let start = (b * ch + c) * h * w;
        start..start + h * w
    })
}

/// Per-channel mean and biased variance over batch and space.
pub fn channel_moments(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let c = x.channels();
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = channel_iter(x.shape(), ch).map(|r| x.data()[r].iter().sum::<f64>()).sum();
        mean[ch] = s / m;
        let ss: f64 = channel_iter(x.shape(), ch)
            .map(|r| x.data()[r].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
            .sum();
        var[ch] = ss / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` per channel.
pub fn batch_norm(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
) -> Result<(Tensor4, BnCache, OpCount), TensorError> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(mismatch(format!("batch norm over {c} channels")));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for ch in 0..c {
        for r in channel_iter(x.shape(), ch) {
            for i in r {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let count = OpCount { macs: 0, other: 2 * x.len() as u64 };
    Ok((y, BnCache { xhat, inv_std, batch_stats }, count))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(grad: &Tensor4, cache: &BnCache, gamma: &[f64]) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let c = grad.channels();
    let m = (grad.len() / c) as f64;
    let mut dx = Tensor4::zeros(grad.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let g = grad.data();
    let xh = cache.xhat.data();
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for r in channel_iter(grad.shape(), ch) {
            for i in r {
                sg += g[i];
                sgx += g[i] * xh[i];
            }
        }
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let k = gamma[ch] * cache.inv_std[ch];
        for r in channel_iter(grad.shape(), ch) {
            for i in r {
                dx.data_mut()[i] = if cache.batch_stats {
                    k * (g[i] - sg / m - xh[i] * sgx / m)
                } else {
                    k * g[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn same_shape(a: &Tensor4, b: &Tensor4, what: &str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add(xs: &[&Tensor4]) -> Result<(Tensor4, OpCount), TensorError> {
    let first = xs.first().ok_or_else(|| mismatch("sum of nothing".into()))?;
    let mut out = (*first).clone();
    for x in &xs[1..] {
        same_shape(first, x, "sum")?;
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
    }
    Ok((out, OpCount { macs: 0, other: ((xs.len() - 1) * first.len()) as u64 }))
}

/// Global-pooling attention: `a + b * sigmoid(max_hw(a))` per (example, channel).
/// Returns the output, the gate per (n, c) and the flat argmax index per (n, c).
/// Ties pick the first maximal element.
pub fn global_pool(a: &Tensor4, b: &Tensor4) -> Result<(Tensor4, Vec<f64>, Vec<usize>, OpCount), TensorError> {
    same_shape(a, b, "global pool")?;
    let plane = a.plane();
    let groups = a.batch() * a.channels();
    let mut gate = Vec::with_capacity(groups);
    let mut argmax = Vec::with_capacity(groups);
    let mut out = a.clone();
    for gi in 0..groups {
        let r = gi * plane..(gi + 1) * plane;
        let pa = &a.data()[r.clone()];
        let mut best = 0;
        for (i, &v) in pa.iter().enumerate().skip(1) {
            if v > pa[best] {
                best = i;
            }
        }
        let s = sigmoid(pa[best]);
        gate.push(s);
        argmax.push(r.start + best);
        for (o, bv) in out.data_mut()[r.clone()].iter_mut().zip(&b.data()[r]) {
            *o += bv * s;
        }
    }
    let other = (groups * (plane - 1) + groups + 2 * a.len()) as u64;
    Ok((out, gate, argmax, OpCount { macs: 0, other }))
}

/// Returns `(da, db)`. The gate's gradient reaches `a` only at each argmax.
pub fn global_pool_backward(grad: &Tensor4, b: &Tensor4, gate: &[f64], argmax: &[usize]) -> (Tensor4, Tensor4) {
    let plane = grad.plane();
    let mut da = grad.clone();
    let mut db = grad.clone();
    for (gi, (&s, &am)) in gate.iter().zip(argmax).enumerate() {
        let r = gi * plane..(gi + 1) * plane;
        let mut dgate = 0.0;
        for (d, (&g, &bv)) in db.data_mut()[r.clone()].iter_mut().zip(grad.data()[r.clone()].iter().zip(&b.data()[r])) {
            *d = g * s;
            dgate += g * bv;
        }
        da.data_mut()[am] += dgate * s * (1.0 - s);
    }
    (da, db)
}

/// Max pooling with kernel = stride = `k`; first-wins argmax per window.
pub fn max_pool(x: &Tensor4, k: usize) -> Result<(Tensor4, Vec<usize>, OpCount), TensorError> {
    let [n, c, h, w] = x.shape();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(mismatch(format!("max pool /{k} of {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    let mut argmax = Vec::with_capacity(out.len());
    let xd = x.data();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = p * h * w + (oy * k) * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = p * h * w + (oy * k + dy) * w + ox * k + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.data_mut()[argmax.len()] = xd[best];
                argmax.push(best);
            }
        }
    }
    let other = (out.len() * (k * k - 1)) as u64;
    Ok((out, argmax, OpCount { macs: 0, other }))
}

pub fn max_pool_backward(grad: &Tensor4, argmax: &[usize], input_shape: [usize; 4]) -> Tensor4 {
    let mut dx = Tensor4::zeros(input_shape);
    for (g, &i) in grad.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(x: &Tensor4, k: usize) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros([n, c, h * k, w * k]);
    let wo = w * k;
    for p in 0..n * c {
        for y in 0..h * k {
            for xo in 0..wo {
                out.data_mut()[(p * h * k + y) * wo + xo] = x.data()[(p * h + y / k) * w + xo / k];
            }
        }
    }
    out
}

pub fn upsample_backward(grad: &Tensor4, k: usize) -> Tensor4 {
    let [n, c, ho, wo] = grad.shape();
    let (h, w) = (ho / k, wo / k);
    let mut dx = Tensor4::zeros([n, c, h, w]);
    for p in 0..n * c {
        for y in 0..ho {
            for x in 0..wo {
                dx.data_mut()[(p * h + y / k) * w + x / k] += grad.data()[(p * ho + y) * wo + x];
            }
        }
    }
    dx
}
