//! Layer primitives with exact forward and backward passes.
//!
//! Every layer consumes and produces batched tensors whose leading extent is
//! the batch size. Backward passes recompute whatever they need from the
//! layer input, so a layer holds no per-call state and can be shared across
//! threads freely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding of `(k - 1) / 2` on every side; odd kernels only.
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Tensor,
    /// `(out)`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels, kh, kw)`
    pub weight: Tensor,
    /// `(out_channels)`
    pub bias: Tensor,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    MaxPool2x2,
    BatchNorm(BatchNorm),
    Flatten,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::InvalidArgument(format!(
                "dense expects weight (out, in) and bias (out), got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Row `k` of the weight matrix.
    pub fn weight_row(&self, k: usize) -> &[f64] {
        let n = self.in_dim();
        &self.weight.data()[k * n..(k + 1) * n]
    }
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, padding: Padding) -> Result<Self> {
        if weight.rank() != 4 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::InvalidArgument(format!(
                "conv2d expects weight (cout, cin, kh, kw) and bias (cout), got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if padding == Padding::Same && (weight.shape()[2] % 2 == 0 || weight.shape()[3] % 2 == 0) {
            return Err(Error::InvalidArgument(
                "conv2d same padding needs an odd kernel".into(),
            ));
        }
        Ok(Self {
            weight,
            bias,
            padding,
        })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn pads(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.dims();
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        }
    }

    /// Output plane size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (_, _, kh, kw) = self.dims();
        let (ph, pw) = self.pads();
        let (hp, wp) = (h + 2 * ph, w + 2 * pw);
        (hp >= kh && wp >= kw).then(|| (hp - kh + 1, wp - kw + 1))
    }
}

impl BatchNorm {
    /// Identity-initialized normalization over `channels`.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::new(vec![channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::new(vec![channels], vec![1.0; channels]).unwrap(),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let c = self.channels();
        let s = x.shape();
        let ok = (s.len() == 2 || s.len() == 4) && s[1] == c;
        if !ok {
            return Err(Error::shape(
                format!("batchnorm({c})"),
                format!("[B, {c}] or [B, {c}, H, W]"),
                s,
            ));
        }
        let spatial = s[2..].iter().product();
        Ok((s[0], c, spatial))
    }

    /// Per-channel `(scale, shift)` of the frozen inference map.
    fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma.data()[c] / (self.running_var.data()[c] + self.eps).sqrt();
                (scale, self.beta.data()[c] - scale * self.running_mean.data()[c])
            })
            .collect()
    }

    /// Training-mode forward: normalizes with the batch statistics.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BatchStats)> {
        let (b, c, sp) = self.check(x)?;
        let m = (b * sp) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for (ci, mu) in mean.iter_mut().enumerate() {
                let off = (bi * c + ci) * sp;
                *mu += xd[off..off + sp].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                var[ci] += xd[off..off + sp]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                let (g, bt) = (self.gamma.data()[ci], self.beta.data()[ci]);
                for k in off..off + sp {
                    xhat[k] = (xd[k] - mean[ci]) * inv_std[ci];
                    y[k] = g * xhat[k] + bt;
                }
            }
        }
        let stats = BatchStats {
            mean,
            var,
            inv_std,
            xhat,
            count: b * sp,
        };
        Ok((Tensor::new(x.shape().to_vec(), y)?, stats))
    }

    /// Backward of [`BatchNorm::forward_train`], including the dependence of
    /// the batch statistics on the input.
    pub fn backward_train(
        &self,
        x: &Tensor,
        stats: &BatchStats,
        upstream: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, c, sp) = self.check(x)?;
        same_shape("batchnorm", x, upstream)?;
        let dy = upstream.data();
        let m = stats.count as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                for (g, xh) in dy[off..off + sp].iter().zip(&stats.xhat[off..off + sp]) {
                    dgamma[ci] += g * xh;
                    dbeta[ci] += g;
                }
            }
        }
        let mut dx = vec![0.0; dy.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                let g = self.gamma.data()[ci];
                // sum(dxhat) = g * dbeta, sum(dxhat * xhat) = g * dgamma
                let s1 = g * dbeta[ci];
                let s2 = g * dgamma[ci];
                for k in off..off + sp {
                    dx[k] = stats.inv_std[ci] / m * (m * g * dy[k] - s1 - stats.xhat[k] * s2);
                }
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), dx)?,
            vec![
                Tensor::new(vec![c], dgamma)?,
                Tensor::new(vec![c], dbeta)?,
            ],
        ))
    }
}

/// Statistics captured by a training-mode batchnorm forward.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    xhat: Vec<f64>,
    /// Values per channel (batch x spatial).
    pub count: usize,
}

fn same_shape(layer: &str, x: &Tensor, upstream: &Tensor) -> Result<()> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(
            format!("{layer} backward"),
            format!("upstream {:?}", x.shape()),
            upstream.shape(),
        ));
    }
    Ok(())
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten => "flatten",
        }
    }

    fn name(&self) -> String {
        match self {
            Layer::Dense(d) => format!("dense({}->{})", d.in_dim(), d.out_dim()),
            Layer::Conv2d(c) => {
                let (co, ci, kh, kw) = c.dims();
                format!("conv2d({ci}->{co}, {kh}x{kw})")
            }
            Layer::BatchNorm(bn) => format!("batchnorm({})", bn.channels()),
            other => other.kind().to_string(),
        }
    }

    /// Trainable parameters, in a fixed order matched by `backward`.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |expected: String| Err(Error::shape(self.name(), expected, input));
        match self {
            Layer::Dense(d) => {
                if input.len() != 2 || input[1] != d.in_dim() {
                    return err(format!("[B, {}]", d.in_dim()));
                }
                Ok(vec![input[0], d.out_dim()])
            }
            Layer::Conv2d(c) => {
                let (co, ci, _, _) = c.dims();
                if input.len() != 4 || input[1] != ci {
                    return err(format!("[B, {ci}, H, W]"));
                }
                match c.output_hw(input[2], input[3]) {
                    Some((oh, ow)) => Ok(vec![input[0], co, oh, ow]),
                    None => err(format!("[B, {ci}, H, W] with H, W >= kernel")),
                }
            }
            Layer::MaxPool2x2 => {
                if input.len() != 4 || input[2] < 2 || input[3] < 2 {
                    return err("[B, C, H, W] with H, W >= 2".into());
                }
                Ok(vec![input[0], input[1], input[2] / 2, input[3] / 2])
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels();
                if !((input.len() == 2 || input.len() == 4) && input[1] == c) {
                    return err(format!("[B, {c}] or [B, {c}, H, W]"));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => {
                if input.len() < 2 {
                    return err("[B, ...]".into());
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Relu => Ok(input.to_vec()),
        }
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let data = match self {
            Layer::Dense(d) => dense_forward(d, x),
            Layer::Conv2d(c) => conv_forward(c, x, &out_shape),
            Layer::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool2x2 => maxpool_forward(x, &out_shape),
            Layer::BatchNorm(bn) => {
                let (b, c, sp) = bn.check(x)?;
                let aff = bn.affine();
                let mut y = x.data().to_vec();
                for bi in 0..b {
                    for (ci, &(scale, shift)) in aff.iter().enumerate().take(c) {
                        let off = (bi * c + ci) * sp;
                        y[off..off + sp]
                            .iter_mut()
                            .for_each(|v| *v = scale * *v + shift);
                    }
                }
                y
            }
            Layer::Flatten => x.data().to_vec(),
        };
        Tensor::new(out_shape, data)
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        self.backward_impl(x, upstream, false).map(|(g, _)| g)
    }

    /// Gradients with respect to the input and to every trainable parameter
    /// (same order as [`Layer::params`]). Batchnorm uses its frozen statistics.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.backward_impl(x, upstream, true)
    }

    fn backward_impl(
        &self,
        x: &Tensor,
        upstream: &Tensor,
        with_params: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let out_shape = self.output_shape(x.shape())?;
        if upstream.shape() != out_shape.as_slice() {
            return Err(Error::shape(
                format!("{} backward", self.name()),
                format!("upstream {out_shape:?}"),
                upstream.shape(),
            ));
        }
        let dy = upstream.data();
        match self {
            Layer::Dense(d) => {
                let (b, n_in, n_out) = (x.batch(), d.in_dim(), d.out_dim());
                let w = d.weight.data();
                let mut dx = vec![0.0; b * n_in];
                for bi in 0..b {
                    let dxb = &mut dx[bi * n_in..(bi + 1) * n_in];
                    for o in 0..n_out {
                        let g = dy[bi * n_out + o];
                        if g != 0.0 {
                            axpy(g, &w[o * n_in..(o + 1) * n_in], dxb);
                        }
                    }
                }
                let mut grads = Vec::new();
                if with_params {
                    let mut dw = vec![0.0; n_out * n_in];
                    let mut db = vec![0.0; n_out];
                    for bi in 0..b {
                        let xb = x.item(bi);
                        for o in 0..n_out {
                            let g = dy[bi * n_out + o];
                            db[o] += g;
                            axpy(g, xb, &mut dw[o * n_in..(o + 1) * n_in]);
                        }
                    }
                    grads = vec![
                        Tensor::new(vec![n_out, n_in], dw)?,
                        Tensor::new(vec![n_out], db)?,
                    ];
                }
                Ok((Tensor::new(x.shape().to_vec(), dx)?, grads))
            }
            Layer::Conv2d(c) => conv_backward(c, x, upstream, &out_shape, with_params),
            Layer::Relu => {
                let dx = x
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Tensor::new(x.shape().to_vec(), dx)?, Vec::new()))
            }
            Layer::MaxPool2x2 => {
                let s = x.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let xd = x.data();
                let mut dx = vec![0.0; xd.len()];
                for plane in 0..s[0] * s[1] {
                    let xo = plane * h * w;
                    let yo = plane * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let idx = xo + pool_argmax(xd, xo, w, i, j);
                            dx[idx] += dy[yo + i * ow + j];
                        }
                    }
                }
                Ok((Tensor::new(s.to_vec(), dx)?, Vec::new()))
            }
            Layer::BatchNorm(bn) => {
                let (b, c, sp) = bn.check(x)?;
                let aff = bn.affine();
                let mut dx = dy.to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let xd = x.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * sp;
                        let scale = aff[ci].0;
                        let mean = bn.running_mean.data()[ci];
                        let inv_std = 1.0 / (bn.running_var.data()[ci] + bn.eps).sqrt();
                        for k in off..off + sp {
                            dx[k] = scale * dy[k];
                            if with_params {
                                dgamma[ci] += dy[k] * (xd[k] - mean) * inv_std;
                                dbeta[ci] += dy[k];
                            }
                        }
                    }
                }
                let grads = if with_params {
                    vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?]
                } else {
                    Vec::new()
                };
                Ok((Tensor::new(x.shape().to_vec(), dx)?, grads))
            }
            Layer::Flatten => Ok((Tensor::new(x.shape().to_vec(), dy.to_vec())?, Vec::new())),
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dense_forward(d: &Dense, x: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (d.in_dim(), d.out_dim());
    let w = d.weight.data();
    let bias = d.bias.data();
    let mut out = Vec::with_capacity(x.batch() * n_out);
    for bi in 0..x.batch() {
        let xb = x.item(bi);
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let acc: f64 = row.iter().zip(xb).map(|(a, b)| a * b).sum();
            out.push(acc + bias[o]);
        }
    }
    out
}

/// Row-major offset (within an `h x w` plane starting at `xo`) of the
/// maximum of pooling window `(i, j)`. Ties go to the first in scan order.
#[inline]
fn pool_argmax(xd: &[f64], xo: usize, w: usize, i: usize, j: usize) -> usize {
    let candidates = [
        2 * i * w + 2 * j,
        2 * i * w + 2 * j + 1,
        (2 * i + 1) * w + 2 * j,
        (2 * i + 1) * w + 2 * j + 1,
    ];
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if xd[xo + c] > xd[xo + best] {
            best = c;
        }
    }
    best
}

fn maxpool_forward(x: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
    for plane in 0..s[0] * s[1] {
        let xo = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                out.push(xd[xo + pool_argmax(xd, xo, w, i, j)]);
            }
        }
    }
    out
}

/// Copies one batch item into a zero-padded `(cin, hp, wp)` buffer.
fn pad_item(item: &[f64], cin: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    if ph == 0 && pw == 0 {
        return item.to_vec();
    }
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![0.0; cin * hp * wp];
    for c in 0..cin {
        for i in 0..h {
            let src = &item[(c * h + i) * w..(c * h + i + 1) * w];
            let dst = (c * hp + i + ph) * wp + pw;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// Unfolds a padded `(cin, hp, wp)` item into a `(cin * kh * kw, oh * ow)`
/// matrix whose column `(i, j)` is the receptive field of output `(i, j)`.
#[allow(clippy::too_many_arguments)]
fn im2col(xp: &[f64], cin: usize, hp: usize, wp: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * kh * kw * oh * ow];
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * oh * ow;
                for i in 0..oh {
                    let src = (c * hp + i + ki) * wp + kj;
                    cols[row + i * ow..row + (i + 1) * ow].copy_from_slice(&xp[src..src + ow]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into a padded item.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], dxp: &mut [f64], cin: usize, hp: usize, wp: usize, kh: usize, kw: usize, oh: usize, ow: usize) {
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * oh * ow;
                for i in 0..oh {
                    let dst = (c * hp + i + ki) * wp + kj;
                    for (d, s) in dxp[dst..dst + ow].iter_mut().zip(&cols[row + i * ow..row + (i + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with either
/// operand optionally read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three slices, whose lengths are checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(c: &Conv2d, x: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let (co, ci, kh, kw) = c.dims();
    let (ph, pw) = c.pads();
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let patch = ci * kh * kw;
    let mut out = vec![0.0; s[0] * co * oh * ow];
    for bi in 0..s[0] {
        let xp = pad_item(x.item(bi), ci, h, w, ph, pw);
        let cols = im2col(&xp, ci, hp, wp, kh, kw, oh, ow);
        let item = &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow];
        for (plane, &bias) in item.chunks_mut(oh * ow).zip(c.bias.data()) {
            plane.fill(bias);
        }
        gemm(co, patch, oh * ow, c.weight.data(), false, &cols, false, 1.0, item);
    }
    out
}

fn conv_backward(
    c: &Conv2d,
    x: &Tensor,
    upstream: &Tensor,
    out_shape: &[usize],
    with_params: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (co, ci, kh, kw) = c.dims();
    let (ph, pw) = c.pads();
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let patch = ci * kh * kw;
    let wd = c.weight.data();
    let dy = upstream.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; if with_params { wd.len() } else { 0 }];
    let mut db = vec![0.0; if with_params { co } else { 0 }];
    let mut dcols = vec![0.0; patch * oh * ow];

    for bi in 0..s[0] {
        let g = &dy[bi * co * oh * ow..(bi + 1) * co * oh * ow];
        if with_params {
            for (d, plane) in db.iter_mut().zip(g.chunks(oh * ow)) {
                *d += plane.iter().sum::<f64>();
            }
            let xp = pad_item(x.item(bi), ci, h, w, ph, pw);
            let cols = im2col(&xp, ci, hp, wp, kh, kw, oh, ow);
            gemm(co, oh * ow, patch, g, false, &cols, true, 1.0, &mut dw);
        }
        gemm(patch, co, oh * ow, wd, true, g, false, 0.0, &mut dcols);
        let mut dxp = vec![0.0; ci * hp * wp];
        col2im(&dcols, &mut dxp, ci, hp, wp, kh, kw, oh, ow);
        // crop the padding back off
        let dst = &mut dx[bi * ci * h * w..(bi + 1) * ci * h * w];
        for cin in 0..ci {
            for i in 0..h {
                let src = (cin * hp + i + ph) * wp + pw;
                dst[(cin * h + i) * w..(cin * h + i + 1) * w].copy_from_slice(&dxp[src..src + w]);
            }
        }
    }
    let grads = if with_params {
        vec![
            Tensor::new(c.weight.shape().to_vec(), dw)?,
            Tensor::new(vec![co], db)?,
        ]
    } else {
        Vec::new()
    };
    Ok((Tensor::new(s.to_vec(), dx)?, grads))
}
