//! Forward kernels and their analytic backward passes.
//!
//! Conventions: 1-D convolution is cross-correlation (no kernel flip) with
//! stride 1 and zero padding. Average pooling divides by the number of
//! in-bounds elements in each window (padding is excluded from the divisor).
//! Max pooling treats padding as `-inf`, so padded slots never win.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn conv_out_len(t: usize, pad: usize, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::dim("kernel size must be >= 1"));
    }
    if t + 2 * pad < k {
        return Err(Error::dim(format!("kernel {k} longer than padded input {}", t + 2 * pad)));
    }
    Ok(t + 2 * pad - k + 1)
}

/// Range of output positions `t` for which input index `t + k - pad` is in
/// `[0, t_in)`. Empty (`lo == hi`) when the tap only ever sees padding,
/// which happens once the padding exceeds the sequence length.
#[inline]
fn valid_range(k: usize, pad: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(t_out);
    let hi = (t_in + pad).saturating_sub(k).min(t_out);
    (lo, hi.max(lo))
}

/// `y[b,o,t] = bias[o] + Σ_{i,k} w[o,i,k] · x[b,i,t+k-pad]`.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let (nb, cin, t_in) = x.dims3()?;
    let (cout, wcin, k) = w.dims3()?;
    if wcin != cin {
        return Err(Error::dim(format!("conv1d: input has {cin} channels, weight expects {wcin}")));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!("conv1d: bias shape {:?}, expected [{cout}]", bias.shape())));
    }
    let t_out = conv_out_len(t_in, pad, k)?;
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0.0; nb * cout * t_out];
    for b in 0..nb {
        for o in 0..cout {
            let yrow = &mut y[(b * cout + o) * t_out..][..t_out];
            yrow.fill(bias.data()[o]);
            for i in 0..cin {
                let xrow = &xd[(b * cin + i) * t_in..][..t_in];
                for kk in 0..k {
                    let wv = wd[(o * cin + i) * k + kk];
                    let (lo, hi) = valid_range(kk, pad, t_in, t_out);
                    if lo == hi {
                        continue;
                    }
                    let src = &xrow[lo + kk - pad..hi + kk - pad];
                    for (yv, xv) in yrow[lo..hi].iter_mut().zip(src) {
                        *yv += wv * xv;
                    }
                }
            }
        }
    }
    Tensor::new(&[nb, cout, t_out], y)
}

/// Gradients of [`conv1d`]: `(dx, dw, dbias)`.
pub fn conv1d_backward(x: &Tensor, w: &Tensor, pad: usize, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (nb, cin, t_in) = x.dims3()?;
    let (cout, _, k) = w.dims3()?;
    let (gb, gc, t_out) = grad_out.dims3()?;
    if gb != nb || gc != cout || t_out != conv_out_len(t_in, pad, k)? {
        return Err(Error::dim("conv1d_backward: grad_out shape mismatch"));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for b in 0..nb {
        for o in 0..cout {
            let grow = &gd[(b * cout + o) * t_out..][..t_out];
            db[o] += grow.iter().sum::<f64>();
            for i in 0..cin {
                let xrow = &xd[(b * cin + i) * t_in..][..t_in];
                let dxrow = &mut dx[(b * cin + i) * t_in..][..t_in];
                for kk in 0..k {
                    let widx = (o * cin + i) * k + kk;
                    let wv = wd[widx];
                    let (lo, hi) = valid_range(kk, pad, t_in, t_out);
                    if lo == hi {
                        continue;
                    }
                    let s0 = lo + kk - pad;
                    let s1 = hi + kk - pad;
                    let mut acc = 0.0;
                    for (g, xv) in grow[lo..hi].iter().zip(&xrow[s0..s1]) {
                        acc += g * xv;
                    }
                    dw[widx] += acc;
                    for (dxv, g) in dxrow[s0..s1].iter_mut().zip(&grow[lo..hi]) {
                        *dxv += wv * g;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?, Tensor::from_vec(db)))
}

fn pool_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::dim("pool kernel and stride must be >= 1"));
    }
    if kernel > t + 2 * pad {
        return Err(Error::dim(format!("pool kernel {kernel} longer than padded input {}", t + 2 * pad)));
    }
    Ok((t + 2 * pad - kernel) / stride + 1)
}

/// In-bounds input window `[lo, hi)` for output position `j`.
#[inline]
fn window(j: usize, kernel: usize, stride: usize, pad: usize, t_in: usize) -> (usize, usize) {
    let start = j * stride;
    let lo = start.saturating_sub(pad);
    let hi = (start + kernel).saturating_sub(pad).min(t_in);
    (lo, hi)
}

pub fn avg_pool1d(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (nb, c, t_in) = x.dims3()?;
    let t_out = pool_out_len(t_in, kernel, stride, pad)?;
    let xd = x.data();
    let mut y = vec![0.0; nb * c * t_out];
    for row in 0..nb * c {
        let xrow = &xd[row * t_in..][..t_in];
        let yrow = &mut y[row * t_out..][..t_out];
        for (j, yv) in yrow.iter_mut().enumerate() {
            let (lo, hi) = window(j, kernel, stride, pad, t_in);
            if hi > lo {
                *yv = xrow[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
    }
    Tensor::new(&[nb, c, t_out], y)
}

pub fn avg_pool1d_backward(
    x_shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let [nb, c, t_in] = x_shape[..] else {
        return Err(Error::dim("avg_pool1d_backward: input must be rank 3"));
    };
    let t_out = pool_out_len(t_in, kernel, stride, pad)?;
    if grad_out.shape() != [nb, c, t_out] {
        return Err(Error::dim("avg_pool1d_backward: grad_out shape mismatch"));
    }
    let gd = grad_out.data();
    let mut dx = vec![0.0; nb * c * t_in];
    for row in 0..nb * c {
        let grow = &gd[row * t_out..][..t_out];
        let dxrow = &mut dx[row * t_in..][..t_in];
        for (j, &g) in grow.iter().enumerate() {
            let (lo, hi) = window(j, kernel, stride, pad, t_in);
            if hi > lo {
                let share = g / (hi - lo) as f64;
                dxrow[lo..hi].iter_mut().for_each(|v| *v += share);
            }
        }
    }
    Tensor::new(x_shape, dx)
}

/// Max pooling; also returns the flat input index that won each window
/// (first occurrence on ties).
pub fn max_pool1d(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let (nb, c, t_in) = x.dims3()?;
    let t_out = pool_out_len(t_in, kernel, stride, pad)?;
    let xd = x.data();
    let mut y = vec![0.0; nb * c * t_out];
    let mut arg = vec![0usize; nb * c * t_out];
    for row in 0..nb * c {
        let xrow = &xd[row * t_in..][..t_in];
        for j in 0..t_out {
            let (lo, hi) = window(j, kernel, stride, pad, t_in);
            // A window lying entirely in the padding (pad >= kernel) yields 0.
            let (mut best, mut best_i) = (f64::NEG_INFINITY, lo);
            for (i, &v) in xrow.iter().enumerate().take(hi).skip(lo) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            if hi > lo {
                y[row * t_out + j] = best;
                arg[row * t_out + j] = row * t_in + best_i;
            } else {
                arg[row * t_out + j] = usize::MAX;
            }
        }
    }
    Ok((Tensor::new(&[nb, c, t_out], y)?, arg))
}

pub fn max_pool1d_backward(x_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim("max_pool1d_backward: argmax/grad length mismatch"));
    }
    let n: usize = x_shape.iter().product();
    let mut dx = vec![0.0; n];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        if i != usize::MAX {
            dx[i] += g;
        }
    }
    Tensor::new(x_shape, dx)
}

/// Mean over the trailing (time) axis: `[B,C,T] -> [B,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (nb, c, t) = x.dims3()?;
    let data = x.data().chunks_exact(t).map(|row| row.iter().sum::<f64>() / t as f64).collect();
    Tensor::new(&[nb, c], data)
}

pub fn global_avg_pool_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [nb, c, t] = x_shape[..] else {
        return Err(Error::dim("global_avg_pool_backward: input must be rank 3"));
    };
    if grad_out.shape() != [nb, c] {
        return Err(Error::dim("global_avg_pool_backward: grad_out shape mismatch"));
    }
    let mut dx = Vec::with_capacity(nb * c * t);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g / t as f64, t));
    }
    Tensor::new(x_shape, dx)
}

/// Maximum over the trailing axis: `[B,C,T] -> [B,C]`, plus winning flat
/// indices.
pub fn global_max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (nb, c, t) = x.dims3()?;
    let mut out = Vec::with_capacity(nb * c);
    let mut arg = Vec::with_capacity(nb * c);
    for (row, chunk) in x.data().chunks_exact(t).enumerate() {
        let (mut best, mut bi) = (chunk[0], 0);
        for (i, &v) in chunk.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = i;
            }
        }
        out.push(best);
        arg.push(row * t + bi);
    }
    Ok((Tensor::new(&[nb, c], out)?, arg))
}

/// Affine map along the trailing axis: `x[..., Din] -> x[..., Dout]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (dout, din) = w.dims2()?;
    let last = *x.shape().last().expect("tensor rank >= 1");
    if last != din {
        return Err(Error::dim(format!("linear: input trailing dim {last}, weight expects {din}")));
    }
    if bias.shape() != [dout] {
        return Err(Error::dim("linear: bias shape mismatch"));
    }
    let rows = x.len() / din;
    let wd = w.data();
    let mut y = Vec::with_capacity(rows * dout);
    for xrow in x.data().chunks_exact(din) {
        for (o, wrow) in wd.chunks_exact(din).enumerate() {
            let dot: f64 = wrow.iter().zip(xrow).map(|(a, b)| a * b).sum();
            y.push(dot + bias.data()[o]);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, y)
}

/// Gradients of [`linear`]: `(dx, dw, dbias)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (dout, din) = w.dims2()?;
    if grad_out.len() * din != x.len() * dout {
        return Err(Error::dim("linear_backward: grad_out shape mismatch"));
    }
    let wd = w.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; dout];
    for ((xrow, grow), dxrow) in
        x.data().chunks_exact(din).zip(grad_out.data().chunks_exact(dout)).zip(dx.chunks_exact_mut(din))
    {
        for (o, &g) in grow.iter().enumerate() {
            db[o] += g;
            let wrow = &wd[o * din..][..din];
            let dwrow = &mut dw[o * din..][..din];
            for i in 0..din {
                dwrow[i] += g * xrow[i];
                dxrow[i] += g * wrow[i];
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?, Tensor::from_vec(db)))
}

/// Iterates `(base, stride)` pairs addressing every 1-D lane along `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (outer, n, inner, n * inner)
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim(format!("softmax axis {axis} out of range")));
    }
    let (outer, n, inner, block) = lanes(x.shape(), axis);
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * block + i;
            let max = (0..n).map(|j| xd[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (xd[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                z += e;
            }
            for j in 0..n {
                y[base + j * inner] /= z;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

/// Backward of softmax given its output `y`: `dx = y ⊙ (g - Σ g⊙y)`.
pub fn softmax_backward(y: &Tensor, axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    y.expect_same_shape(grad_out)?;
    let (outer, n, inner, block) = lanes(y.shape(), axis);
    let yd = y.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * block + i;
            let dot: f64 = (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
            for j in 0..n {
                let idx = base + j * inner;
                dx[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.zip_map(grad_out, |s, g| g * s * (1.0 - s))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Backward of relu given its input `x`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Train or eval behaviour for layers that differ between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
/// Running statistics decay: `running = m·running + (1-m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Everything the backward pass and the running-statistics update need.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mode: BnMode,
    /// Normalized input (before scale/shift).
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f64>,
}

/// Per-channel batch normalization over the `(B, T)` axes of `[B,C,T]`.
pub fn batch_norm1d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let (nb, c, t) = x.dims3()?;
    for p in [gamma, beta, running_mean, running_var] {
        if p.shape() != [c] {
            return Err(Error::dim("batch_norm1d: per-channel parameter shape mismatch"));
        }
    }
    let n = nb * t;
    let xd = x.data();
    let (mean, var, var_unbiased) = match mode {
        BnMode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch(format!("batch norm needs B*T >= 2 per channel, got {n}")));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..nb {
                    s += xd[(b * c + ch) * t..][..t].iter().sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for b in 0..nb {
                    ss += xd[(b * c + ch) * t..][..t].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / n as f64;
            }
            let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
            (mean, var, unbiased)
        }
        BnMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec(), running_var.data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..nb {
        for ch in 0..c {
            let off = (b * c + ch) * t;
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + t {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                y[i] = g * h + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        BnCache {
            mode,
            x_hat: Tensor::new(x.shape(), x_hat)?,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        },
    ))
}

/// Gradients of [`batch_norm1d`]: `(dx, dgamma, dbeta)`.
pub fn batch_norm1d_backward(cache: &BnCache, gamma: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (nb, c, t) = grad_out.dims3()?;
    cache.x_hat.expect_same_shape(grad_out)?;
    let gd = grad_out.data();
    let xh = cache.x_hat.data();
    let n = (nb * t) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..nb {
        for ch in 0..c {
            let off = (b * c + ch) * t;
            for i in off..off + t {
                dgamma[ch] += gd[i] * xh[i];
                dbeta[ch] += gd[i];
            }
        }
    }
    let mut dx = vec![0.0; grad_out.len()];
    for ch in 0..c {
        let g = gamma.data()[ch];
        let is = cache.inv_std[ch];
        match cache.mode {
            BnMode::Train => {
                // dx = γ·inv_std/N · (N·g - Σg - x̂·Σ(g·x̂))
                let (sum_g, sum_gx) = (dbeta[ch], dgamma[ch]);
                for b in 0..nb {
                    let off = (b * c + ch) * t;
                    for i in off..off + t {
                        dx[i] = g * is / n * (n * gd[i] - sum_g - xh[i] * sum_gx);
                    }
                }
            }
            BnMode::Eval => {
                for b in 0..nb {
                    let off = (b * c + ch) * t;
                    for i in off..off + t {
                        dx[i] = g * is * gd[i];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(grad_out.shape(), dx)?, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)))
}

/// `y[b,c,t] = x[b,c,t] · gate[b,c]`.
pub fn gate_channels(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (nb, c, t) = x.dims3()?;
    if gate.shape() != [nb, c] {
        return Err(Error::dim(format!("channel gate shape {:?}, expected [{nb}, {c}]", gate.shape())));
    }
    let mut y = x.data().to_vec();
    for (row, &g) in y.chunks_exact_mut(t).zip(gate.data()) {
        row.iter_mut().for_each(|v| *v *= g);
    }
    Tensor::new(x.shape(), y)
}

/// Gradients of [`gate_channels`]: `(dx, dgate)`.
pub fn gate_channels_backward(x: &Tensor, gate: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, t) = x.dims3()?;
    x.expect_same_shape(grad_out)?;
    let mut dx = grad_out.data().to_vec();
    let mut dgate = vec![0.0; gate.len()];
    for (((dxrow, xrow), &g), dg) in
        dx.chunks_exact_mut(t).zip(x.data().chunks_exact(t)).zip(gate.data()).zip(dgate.iter_mut())
    {
        let mut acc = 0.0;
        for (d, xv) in dxrow.iter_mut().zip(xrow) {
            acc += *d * xv;
            *d *= g;
        }
        *dg = acc;
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(gate.shape(), dgate)?))
}

/// `y[b,c,t] = x[b,c,t] · gate[b,t]`.
pub fn gate_time(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (nb, c, t) = x.dims3()?;
    if gate.shape() != [nb, t] {
        return Err(Error::dim(format!("temporal gate shape {:?}, expected [{nb}, {t}]", gate.shape())));
    }
    let mut y = x.data().to_vec();
    for (b, chunk) in y.chunks_exact_mut(c * t).enumerate() {
        let g = &gate.data()[b * t..][..t];
        for row in chunk.chunks_exact_mut(t) {
            row.iter_mut().zip(g).for_each(|(v, gv)| *v *= gv);
        }
    }
    Tensor::new(x.shape(), y)
}

/// Gradients of [`gate_time`]: `(dx, dgate)`.
pub fn gate_time_backward(x: &Tensor, gate: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, t) = x.dims3()?;
    x.expect_same_shape(grad_out)?;
    let mut dx = grad_out.data().to_vec();
    let mut dgate = vec![0.0; gate.len()];
    for (b, (dchunk, xchunk)) in dx.chunks_exact_mut(c * t).zip(x.data().chunks_exact(c * t)).enumerate() {
        let g = &gate.data()[b * t..][..t];
        let dg = &mut dgate[b * t..][..t];
        for (drow, xrow) in dchunk.chunks_exact_mut(t).zip(xchunk.chunks_exact(t)) {
            for i in 0..t {
                dg[i] += drow[i] * xrow[i];
                drow[i] *= g[i];
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(gate.shape(), dgate)?))
}
