//! Forward and backward kernels on `[batch, time, channels]` tensors.
//!
//! Each backward function takes the upstream gradient shaped like the
//! forward output and returns gradients for every input it depends on.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::stream;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Left padding of a same-length convolution with kernel `k`.
pub fn conv_left_pad(k: usize) -> usize {
    (k - 1) / 2
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (bs, t, cin) = x.dims3("conv1d input")?;
    w.expect_rank(3, "conv1d weights")?;
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wcin != cin {
        return shape_err(format!("conv1d weights expect {wcin} input channels, got {cin}"));
    }
    if b.shape() != [cout] {
        return shape_err(format!("conv1d bias shape {:?}, expected [{cout}]", b.shape()));
    }
    if k == 0 {
        return shape_err("conv1d kernel size must be at least 1");
    }
    if t == 0 {
        return shape_err("conv1d input has no timesteps");
    }
    Ok((bs, t, cin, cout, k))
}

/// Stride-1 convolution with zero padding that keeps the length.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, t, cin, cout, k) = check_conv(x, w, b)?;
    let pad = conv_left_pad(k);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; bs * t * cout];
    for n in 0..bs {
        for tt in 0..t {
            let out = &mut y[(n * t + tt) * cout..(n * t + tt + 1) * cout];
            out.copy_from_slice(bd);
            for j in 0..k {
                let src = tt + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = &xd[(n * t + src - pad) * cin..(n * t + src - pad + 1) * cin];
                for (o, acc) in out.iter_mut().enumerate() {
                    let wrow = &wd[o * cin * k..(o + 1) * cin * k];
                    let mut s = 0.0;
                    for (c, xv) in xrow.iter().enumerate() {
                        s += wrow[c * k + j] * xv;
                    }
                    *acc += s;
                }
            }
        }
    }
    Tensor::new(vec![bs, t, cout], y)
}

pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    gy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (bs, t, cin, cout, k) = check_conv(x, w, b)?;
    let pad = conv_left_pad(k);
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; cout];
    for n in 0..bs {
        for tt in 0..t {
            let g = &gy[(n * t + tt) * cout..(n * t + tt + 1) * cout];
            for (acc, gv) in gb.iter_mut().zip(g) {
                *acc += gv;
            }
            for j in 0..k {
                let src = tt + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let base = (n * t + src - pad) * cin;
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        let wi = o * cin * k + c * k + j;
                        gw[wi] += go * xd[base + c];
                        gx[base + c] += go * wd[wi];
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Max pooling over time with a trailing partial window. Returns the output
/// and, for each output element, the flat input index it came from.
pub fn maxpool1d(x: &Tensor, pool: usize) -> Result<(Tensor, Vec<usize>)> {
    if pool == 0 {
        return arg_err("pool size must be at least 1");
    }
    let (bs, t, c) = x.dims3("maxpool1d input")?;
    let tp = t.div_ceil(pool);
    let xd = x.data();
    let mut y = Vec::with_capacity(bs * tp * c);
    let mut arg = Vec::with_capacity(bs * tp * c);
    for n in 0..bs {
        for w in 0..tp {
            let lo = w * pool;
            let hi = (lo + pool).min(t);
            for ch in 0..c {
                let mut best = (n * t + lo) * c + ch;
                for tt in lo + 1..hi {
                    let i = (n * t + tt) * c + ch;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                y.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![bs, tp, c], y)?, arg))
}

pub fn maxpool1d_backward(input_len: usize, argmax: &[usize], gy: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&i, g) in argmax.iter().zip(gy) {
        gx[i] += g;
    }
    gx
}

/// Batch statistics kept for the backward pass of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(format!("batch norm expects gamma/beta of shape [{c}]"));
    }
    Ok(())
}

/// Normalizes each channel by its mean and variance over batch and time.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let (bs, t, c) = x.dims3("batchnorm input")?;
    check_affine(c, gamma, beta)?;
    let count = bs * t;
    if count == 0 {
        return Err(Error::State("batch norm over an empty batch".into()));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    for row in xd.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for row in xd.chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xd.len());
    let mut y = Vec::with_capacity(xd.len());
    for row in xd.chunks(c) {
        for ch in 0..c {
            let h = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma.data()[ch] * h + beta.data()[ch]);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

pub fn batchnorm_train_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let n = cache.count as f64;
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for (grow, hrow) in gy.chunks(c).zip(cache.xhat.chunks(c)) {
        for ch in 0..c {
            gg[ch] += grow[ch] * hrow[ch];
            gb[ch] += grow[ch];
        }
    }
    let mut gx = Vec::with_capacity(gy.len());
    for (grow, hrow) in gy.chunks(c).zip(cache.xhat.chunks(c)) {
        for ch in 0..c {
            let s = gamma.data()[ch] * cache.inv_std[ch] / n;
            gx.push(s * (n * grow[ch] - gb[ch] - hrow[ch] * gg[ch]));
        }
    }
    (gx, gg, gb)
}

/// Inference-mode batch norm: an affine map per channel.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (_, _, c) = x.dims3("batchnorm input")?;
    check_affine(c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return shape_err("running statistics do not match the channel count");
    }
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for ch in 0..c {
            let h = (row[ch] - running_mean[ch]) / (running_var[ch] + eps).sqrt();
            y.push(gamma.data()[ch] * h + beta.data()[ch]);
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub fn batchnorm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut gx = Vec::with_capacity(gy.len());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for (grow, xrow) in gy.chunks(c).zip(x.data().chunks(c)) {
        for ch in 0..c {
            gx.push(grow[ch] * gamma.data()[ch] * inv[ch]);
            gg[ch] += grow[ch] * (xrow[ch] - running_mean[ch]) * inv[ch];
            gb[ch] += grow[ch];
        }
    }
    (gx, gg, gb)
}

/// Inverted-dropout mask: 0 for dropped elements, `1/(1-rate)` for kept ones.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return arg_err(format!("dropout rate {rate} outside [0, 1)"));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = stream(seed, &[0x4452]);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Parameters of one LSTM direction. Gate blocks are stacked in the order
/// input, forget, cell, output along the first axis of every tensor.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub bias: &'a Tensor,
}

impl LstmParams<'_> {
    fn dims(&self, cin: usize) -> Result<usize> {
        self.w_hh.expect_rank(2, "lstm w_hh")?;
        let h = self.w_hh.shape()[1];
        if h == 0 || self.w_hh.shape()[0] != 4 * h {
            return shape_err(format!("lstm w_hh shape {:?}", self.w_hh.shape()));
        }
        if self.w_ih.shape() != [4 * h, cin] {
            return shape_err(format!(
                "lstm w_ih shape {:?}, expected [{}, {cin}]",
                self.w_ih.shape(),
                4 * h
            ));
        }
        if self.bias.shape() != [4 * h] {
            return shape_err(format!("lstm bias shape {:?}", self.bias.shape()));
        }
        Ok(h)
    }
}

/// Activations saved by [`lstm`] for backpropagation through time.
/// Indexed by `[batch][time]` in the tensor's own time order.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Activated gates `i, f, g, o`, `4H` per step.
    pub gates: Vec<f64>,
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
    pub hidden_size: usize,
    pub reverse: bool,
}

/// Single LSTM direction with zero initial state. `reverse` runs from the
/// last timestep to the first; outputs stay aligned with the input.
pub fn lstm(x: &Tensor, p: LstmParams<'_>, reverse: bool) -> Result<(Tensor, LstmCache)> {
    let (bs, t, cin) = x.dims3("lstm input")?;
    let h = p.dims(cin)?;
    let (xd, wi, wh, bias) = (x.data(), p.w_ih.data(), p.w_hh.data(), p.bias.data());
    let mut gates = vec![0.0; bs * t * 4 * h];
    let mut cell = vec![0.0; bs * t * h];
    let mut hidden = vec![0.0; bs * t * h];
    let mut z = vec![0.0; 4 * h];
    for n in 0..bs {
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for step in 0..t {
            let tt = if reverse { t - 1 - step } else { step };
            let xrow = &xd[(n * t + tt) * cin..(n * t + tt + 1) * cin];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut s = bias[r];
                for (a, b) in wi[r * cin..(r + 1) * cin].iter().zip(xrow) {
                    s += a * b;
                }
                for (a, b) in wh[r * h..(r + 1) * h].iter().zip(&h_prev) {
                    s += a * b;
                }
                *zr = s;
            }
            let at = n * t + tt;
            let g = &mut gates[at * 4 * h..(at + 1) * 4 * h];
            for u in 0..h {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[h + u]);
                let gg = z[2 * h + u].tanh();
                let o = sigmoid(z[3 * h + u]);
                let c = f * c_prev[u] + i * gg;
                g[u] = i;
                g[h + u] = f;
                g[2 * h + u] = gg;
                g[3 * h + u] = o;
                cell[at * h + u] = c;
                hidden[at * h + u] = o * c.tanh();
            }
            c_prev.copy_from_slice(&cell[at * h..(at + 1) * h]);
            h_prev.copy_from_slice(&hidden[at * h..(at + 1) * h]);
        }
    }
    let y = Tensor::new(vec![bs, t, h], hidden.clone())?;
    Ok((
        y,
        LstmCache {
            gates,
            cell,
            hidden,
            hidden_size: h,
            reverse,
        },
    ))
}

/// Gradients `(x, w_ih, w_hh, bias)` by backpropagation through time.
pub fn lstm_backward(
    x: &Tensor,
    p: LstmParams<'_>,
    cache: &LstmCache,
    gy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (bs, t, cin) = x.dims3("lstm input")?;
    let h = p.dims(cin)?;
    let (xd, wi, wh) = (x.data(), p.w_ih.data(), p.w_hh.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gwi = vec![0.0; wi.len()];
    let mut gwh = vec![0.0; wh.len()];
    let mut gb = vec![0.0; 4 * h];
    let mut dz = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for n in 0..bs {
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for step in (0..t).rev() {
            let tt = if cache.reverse { t - 1 - step } else { step };
            let prev_t = if step == 0 {
                None
            } else if cache.reverse {
                Some(tt + 1)
            } else {
                Some(tt - 1)
            };
            let at = n * t + tt;
            let g = &cache.gates[at * 4 * h..(at + 1) * 4 * h];
            let c = &cache.cell[at * h..(at + 1) * h];
            let (c_prev, h_prev) = match prev_t {
                Some(pt) => (
                    &cache.cell[(n * t + pt) * h..(n * t + pt + 1) * h],
                    &cache.hidden[(n * t + pt) * h..(n * t + pt + 1) * h],
                ),
                None => (&zeros[..], &zeros[..]),
            };
            for u in 0..h {
                let (i, f, gg, o) = (g[u], g[h + u], g[2 * h + u], g[3 * h + u]);
                let tc = c[u].tanh();
                let dh = gy[at * h + u] + dh_next[u];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
                dz[u] = dc * gg * i * (1.0 - i);
                dz[h + u] = dc * c_prev[u] * f * (1.0 - f);
                dz[2 * h + u] = dc * i * (1.0 - gg * gg);
                dz[3 * h + u] = dh * tc * o * (1.0 - o);
                dc_next[u] = dc * f;
            }
            let xrow = &xd[at * cin..(at + 1) * cin];
            let gxrow = &mut gx[at * cin..(at + 1) * cin];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for (r, &d) in dz.iter().enumerate() {
                gb[r] += d;
                if d == 0.0 {
                    continue;
                }
                for c in 0..cin {
                    gwi[r * cin + c] += d * xrow[c];
                    gxrow[c] += d * wi[r * cin + c];
                }
                for u in 0..h {
                    gwh[r * h + u] += d * h_prev[u];
                    dh_next[u] += d * wh[r * h + u];
                }
            }
        }
    }
    Ok((gx, gwi, gwh, gb))
}

/// Affine map over the last axis: `y = x W^T + b` with `W: [out, in]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    w.expect_rank(2, "dense weights")?;
    let (out, cin) = (w.shape()[0], w.shape()[1]);
    let Some(&last) = x.shape().last() else {
        return shape_err("dense input must have rank >= 1");
    };
    if last != cin {
        return shape_err(format!("dense expects {cin} input features, got {last}"));
    }
    if b.shape() != [out] {
        return shape_err(format!("dense bias shape {:?}, expected [{out}]", b.shape()));
    }
    let mut y = Vec::with_capacity(x.len() / cin.max(1) * out);
    for row in x.data().chunks(cin) {
        for o in 0..out {
            let mut s = b.data()[o];
            for (a, v) in w.data()[o * cin..(o + 1) * cin].iter().zip(row) {
                s += a * v;
            }
            y.push(s);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = out;
    Tensor::new(shape, y)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (out, cin) = (w.shape()[0], w.shape()[1]);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; out];
    for ((xrow, grow), gxrow) in x
        .data()
        .chunks(cin)
        .zip(gy.chunks(out))
        .zip(gx.chunks_mut(cin))
    {
        for (o, &g) in grow.iter().enumerate() {
            gb[o] += g;
            for c in 0..cin {
                gw[o * cin + c] += g * xrow[c];
                gxrow[c] += g * w.data()[o * cin + c];
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu(x: &Tensor) -> Tensor {
    let y = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), y).expect("same shape")
}

pub fn relu_backward(x: &Tensor, gy: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(gy)
        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
        .collect()
}

/// Concatenation along the last axis.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return shape_err(format!("cannot concatenate {sa:?} and {sb:?}"));
    }
    let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let mut y = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        y.extend_from_slice(ra);
        y.extend_from_slice(rb);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().expect("non-empty") = ca + cb;
    Tensor::new(shape, y)
}

pub fn concat_last_backward(ca: usize, cb: usize, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ga = Vec::with_capacity(gy.len() / (ca + cb) * ca);
    let mut gb = Vec::with_capacity(gy.len() / (ca + cb) * cb);
    for row in gy.chunks(ca + cb) {
        ga.extend_from_slice(&row[..ca]);
        gb.extend_from_slice(&row[ca..]);
    }
    (ga, gb)
}

/// Log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let Some(&c) = x.shape().last() else {
        return shape_err("log_softmax needs rank >= 1");
    };
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        y.extend(crate::losses::log_softmax(row)?);
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub fn log_softmax_last_backward(y: &Tensor, gy: &[f64]) -> Vec<f64> {
    let c = *y.shape().last().expect("rank checked in forward");
    let mut gx = Vec::with_capacity(gy.len());
    for (yrow, grow) in y.data().chunks(c).zip(gy.chunks(c)) {
        let s: f64 = grow.iter().sum();
        gx.extend(yrow.iter().zip(grow).map(|(l, g)| g - l.exp() * s));
    }
    gx
}

/// Mean over the time axis: `[B, T, C] -> [B, C]`.
pub fn mean_time(x: &Tensor) -> Result<Tensor> {
    let (bs, t, c) = x.dims3("mean over time")?;
    if t == 0 {
        return shape_err("mean over an empty time axis");
    }
    let mut y = vec![0.0; bs * c];
    for n in 0..bs {
        for tt in 0..t {
            for ch in 0..c {
                y[n * c + ch] += x.data()[(n * t + tt) * c + ch];
            }
        }
    }
    y.iter_mut().for_each(|v| *v /= t as f64);
    Tensor::new(vec![bs, c], y)
}

pub fn mean_time_backward(shape: &[usize], gy: &[f64]) -> Vec<f64> {
    let (bs, t, c) = (shape[0], shape[1], shape[2]);
    let mut gx = vec![0.0; bs * t * c];
    for n in 0..bs {
        for tt in 0..t {
            for ch in 0..c {
                gx[(n * t + tt) * c + ch] = gy[n * c + ch] / t as f64;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(b: usize, t: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, t, c], data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t3(1, 4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(conv1d(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn conv_constant_interior() {
        let x = t3(1, 8, 1, vec![2.0; 8]);
        let w = Tensor::new(vec![1, 1, 4], vec![0.5, 1.0, -0.25, 0.25]).unwrap();
        let b = Tensor::new(vec![1], vec![0.1]).unwrap();
        let y = conv1d(&x, &w, &b).unwrap();
        // kernel sums to 1.5, pad 1 left and 2 right
        for tt in 1..6 {
            assert!((y.data()[tt] - (1.5 * 2.0 + 0.1)).abs() < 1e-12);
        }
        assert_eq!(y.shape(), &[1, 8, 1]);
        assert_eq!(conv_left_pad(4), 1);
        assert_eq!(conv_left_pad(3), 1);
    }

    #[test]
    fn conv_shape_errors() {
        let x = t3(1, 4, 2, vec![0.0; 8]);
        let w = Tensor::zeros(&[3, 1, 2]);
        assert!(matches!(conv1d(&x, &w, &Tensor::zeros(&[3])), Err(Error::Shape(_))));
        let w = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(conv1d(&x, &w, &Tensor::zeros(&[2])), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_cases() {
        let x = t3(1, 4, 1, vec![1.0, 3.0, 2.0, 0.0]);
        let (y, arg) = maxpool1d(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
        let (y, _) = maxpool1d(&x, 1).unwrap();
        assert_eq!(y, x);
        let (y, _) = maxpool1d(&t3(1, 5, 1, vec![1.0, 0.0, 0.0, 0.0, 9.0]), 2).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 9.0]);
        assert!(matches!(maxpool1d(&x, 0), Err(Error::Argument(_))));
        // ties route to the first index
        let (_, arg) = maxpool1d(&t3(1, 2, 1, vec![5.0, 5.0]), 2).unwrap();
        assert_eq!(maxpool1d_backward(2, &arg, &[1.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn batchnorm_normalizes() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64).collect();
        let x = t3(2, 4, 3, data);
        let (y, _) = batchnorm_train(&x, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3]), 1e-12).unwrap();
        for ch in 0..3 {
            let col: Vec<f64> = y.data().chunks(3).map(|r| r[ch]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
        let beta = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let (y, _) = batchnorm_train(&x, &Tensor::zeros(&[3]), &beta, 1e-5).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, beta.data());
        }
    }

    #[test]
    fn dropout_statistics() {
        assert!(dropout_mask(10, 0.0, 1).unwrap().iter().all(|&m| m == 1.0));
        let mask = dropout_mask(100_000, 0.2, 7).unwrap();
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 1e5;
        assert!((0.19..=0.21).contains(&zeros));
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.25).abs() < 1e-15));
        assert_eq!(mask, dropout_mask(100_000, 0.2, 7).unwrap());
        assert!(dropout_mask(3, 1.0, 0).is_err());
    }

    #[test]
    fn lstm_zero_weights() {
        let x = t3(1, 3, 2, vec![0.5, -1.0, 2.0, 0.1, 0.0, 3.0]);
        let (w_ih, w_hh, b) = (Tensor::zeros(&[8, 2]), Tensor::zeros(&[8, 2]), Tensor::zeros(&[8]));
        let p = LstmParams { w_ih: &w_ih, w_hh: &w_hh, bias: &b };
        let (y, _) = lstm(&x, p, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_cell() {
        let x = t3(1, 1, 1, vec![0.7]);
        let w_ih = Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let w_hh = Tensor::new(vec![4, 1], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0, 1.0, -0.5, 0.2]).unwrap();
        let p = LstmParams { w_ih: &w_ih, w_hh: &w_hh, bias: &b };
        let (y, _) = lstm(&x, p, false).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = s(0.07);
        let g = (0.21f64 - 0.5).tanh();
        let o = s(0.28 + 0.2);
        let expected = o * (i * g).tanh();
        assert!((y.data()[0] - expected).abs() < 1e-15);
        let (yr, _) = lstm(&x, p, true).unwrap();
        assert_eq!(yr.data(), y.data());
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = dense(&Tensor::zeros(&[1, 2]), &Tensor::filled(&[3, 2], 0.5), &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn concat_and_split_gradients() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = concat_last(&a, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let (ga, gb) = concat_last_backward(1, 2, y.data());
        assert_eq!((ga.as_slice(), gb.as_slice()), (a.data(), b.data()));
    }
}
