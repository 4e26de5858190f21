//! Forward and backward kernels for the supported layer kinds.
//!
//! All activations are NCHW. Convolutions use "same" zero padding with
//! stride 1 and are lowered to a matrix product over an im2col buffer.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe matrices fully contained in the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x_lo].fill(0.0);
                    drow[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    drow[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    let prow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (p, v) in prow.iter_mut().zip(&srow[x_lo..x_hi]) {
                        *p += v;
                    }
                }
            }
        }
    }
}

/// Square-kernel convolution. `weight` is `[out, in, k, k]`.
pub fn conv2d_forward(x: &Tensor, weight: &[f64], bias: &[f64], k: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let oc = bias.len();
    let kk = c * k * k;
    if weight.len() != oc * kk {
        return Err(Error::Shape {
            location: "conv2d weight".into(),
            expected: vec![oc, c, k, k],
            actual: vec![weight.len()],
        });
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, oc, h, w]);
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for b in 0..n {
        let xb = x.outer(b);
        let colref: &[f64] = if k == 1 {
            xb
        } else {
            im2col(xb, c, h, w, k, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[b * oc * hw..(b + 1) * oc * hw];
        for (o, &bv) in bias.iter().enumerate() {
            ob[o * hw..(o + 1) * hw].fill(bv);
        }
        gemm(oc, kk, hw, weight, (kk, 1), colref, (hw, 1), 1.0, ob);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor, weight: &[f64], k: usize, dout: &Tensor) -> Result<ConvGrads> {
    let [n, c, h, w] = x.dims4()?;
    let [_, oc, _, _] = dout.dims4()?;
    let kk = c * k * k;
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = vec![0.0; oc * kk];
    let mut db = vec![0.0; oc];
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    let mut dcols = vec![0.0; kk * hw];
    for b in 0..n {
        let xb = x.outer(b);
        let gb = dout.outer(b);
        for (o, d) in db.iter_mut().enumerate() {
            *d += gb[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        let colref: &[f64] = if k == 1 {
            xb
        } else {
            im2col(xb, c, h, w, k, &mut cols);
            &cols
        };
        // dW += dOut * cols^T
        gemm(oc, hw, kk, gb, (hw, 1), colref, (1, hw), 1.0, &mut dw);
        // dCols = W^T * dOut
        gemm(kk, oc, hw, weight, (1, kk), gb, (hw, 1), 0.0, &mut dcols);
        let dxb = &mut dx.data_mut()[b * c * hw..(b + 1) * c * hw];
        if k == 1 {
            dxb.copy_from_slice(&dcols);
        } else {
            col2im(&dcols, c, h, w, k, dxb);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Cached quantities from a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Whether batch statistics (training) or running statistics were used.
    pub batch_stats: bool,
}

pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub fn batchnorm_forward_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, BatchNormCache, BatchStats)> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        let xb = x.outer(b);
        for ch in 0..c {
            mean[ch] += xb[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        let xb = x.outer(b);
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += xb[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    let var_unbiased = var
        .iter()
        .map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 })
        .collect();
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![0.0; x.numel()];
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
        BatchStats { mean, var_unbiased },
    ))
}

pub fn batchnorm_forward_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x.data()[i] - running_mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward(
    dy: &Tensor,
    cache: &BatchNormCache,
    gamma: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = dy.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let g = dy.data()[i];
                dbeta[ch] += g;
                dgamma[ch] += g * cache.xhat[i];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                // dx = gamma*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                let sum_dy = dbeta[ch];
                let sum_dy_xhat = dgamma[ch];
                for i in base..base + hw {
                    dx.data_mut()[i] = scale / m
                        * (m * dy.data()[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            } else {
                for i in base..base + hw {
                    dx.data_mut()[i] = scale * dy.data()[i];
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn leaky_relu_forward(x: &Tensor, slope: f64) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v <= 0.0 {
            *v *= slope;
        }
    }
    y
}

/// Uses the forward output: its sign matches the input's for positive slopes.
pub fn leaky_relu_backward(y: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    let mut dx = dy.clone();
    for (g, &o) in dx.data_mut().iter_mut().zip(y.data()) {
        if o <= 0.0 {
            *g *= slope;
        }
    }
    dx
}

/// 2x2 max pooling with stride 2; returns the output and flat argmax indices.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "max-pool needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for p in 0..n * c {
        let ib = p * h * w;
        let ob = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ib + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ib + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                y.data_mut()[ob + oy * ow + ox] = xd[best];
                arg[ob + oy * ow + ox] = best;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

pub fn upsample2_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            let src = &xd[p * h * w + (oy / 2) * w..p * h * w + (oy / 2 + 1) * w];
            let dst = &mut yd[p * oh * ow + oy * ow..p * oh * ow + (oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    Ok(y)
}

pub fn upsample2_backward(dy: &Tensor) -> Result<Tensor> {
    let [n, c, oh, ow] = dy.dims4()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let gd = dy.data();
    let dd = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                dd[p * h * w + (oy / 2) * w + ox / 2] += gd[p * oh * ow + oy * ow + ox];
            }
        }
    }
    Ok(dx)
}

/// Channel-wise concatenation.
pub fn concat_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let [n, _, h, w] = parts[0].dims4()?;
    let mut total_c = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape {
                location: "concat".into(),
                expected: vec![n, pc, h, w],
                actual: p.shape().to_vec(),
            });
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.outer(b));
        }
    }
    Tensor::new(vec![n, total_c, h, w], data)
}

pub fn concat_backward(dy: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, _, h, w] = dy.dims4()?;
    let hw = h * w;
    let mut outs: Vec<Tensor> = channels.iter().map(|&c| Tensor::zeros(&[n, c, h, w])).collect();
    for b in 0..n {
        let src = dy.outer(b);
        let mut off = 0;
        for (t, &c) in outs.iter_mut().zip(channels) {
            t.data_mut()[b * c * hw..(b + 1) * c * hw].copy_from_slice(&src[off..off + c * hw]);
            off += c * hw;
        }
    }
    Ok(outs)
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = if *v >= 0.0 {
            1.0 / (1.0 + (-*v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
    }
    y
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *g *= s * (1.0 - s);
    }
    dx
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut y = x.clone();
    let yd = y.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(yd[base + ch * hw + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (yd[base + ch * hw + p] - mx).exp();
                yd[base + ch * hw + p] = e;
                sum += e;
            }
            for ch in 0..c {
                yd[base + ch * hw + p] /= sum;
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = y.dims4()?;
    let hw = h * w;
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), dy.data());
    let dd = dx.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let dot: f64 = (0..c)
                .map(|ch| yd[base + ch * hw + p] * gd[base + ch * hw + p])
                .sum();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dd[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Ok(dx)
}
