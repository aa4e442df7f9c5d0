//! Small layer library on top of candle tensors: convolutions, linear
//! maps, normalisation layers and the resampling primitives shared by the
//! encoder, the attention gates and the decoder.

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamBuilder;

/// Forward-pass mode. Only normalisation layers care.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Batch,
    Group,
    None,
}

/// 2-D convolution with bias, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
            bias: true,
        }
    }
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOptions,
        pb: ParamBuilder,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::config(format!(
                "conv {in_channels}->{out_channels} k{kernel}: sizes must be positive"
            )));
        }
        if in_channels % opts.groups != 0 || out_channels % opts.groups != 0 {
            return Err(Error::config(format!(
                "conv {in_channels}->{out_channels}: groups {} must divide both",
                opts.groups
            )));
        }
        let fan_in = in_channels / opts.groups * kernel * kernel;
        let weight = pb.kaiming_uniform(
            "weight",
            &[out_channels, in_channels / opts.groups, kernel, kernel],
            fan_in,
        )?;
        let bias = if opts.bias {
            Some(pb.uniform("bias", &[out_channels], 1.0 / (fan_in as f64).sqrt())?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: opts.stride,
            padding: opts.padding,
            groups: opts.groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Fully connected layer acting on the last axis; weight is `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, pb: ParamBuilder) -> Result<Self> {
        let weight = pb.normal("weight", &[out_features, in_features], 0.02)?;
        let bias = pb.constant("bias", &[out_features], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Layer normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, pb: ParamBuilder) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[dim], 1.0)?,
            bias: pb.constant("bias", &[dim], 0.0)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalisation over `[B, C, H, W]` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, pb: ParamBuilder) -> Result<Self> {
        Ok(Self {
            weight: pb.constant("weight", &[channels], 1.0)?,
            bias: pb.constant("bias", &[channels], 0.0)?,
            running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
            running_var: pb.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let n = b * h * w;
                let flat = x.transpose(0, 1)?.reshape((c, n))?;
                let mean = flat.mean_keepdim(1)?;
                let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
                let mean = mean.flatten_all()?;
                let var = var.flatten_all()?;
                let unbiased = if n > 1 {
                    (var.detach() * (n as f64 / (n - 1) as f64))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            ),
        };
        let shape = (1, c, 1, 1);
        let scale = (self.weight.as_tensor() / (var + self.eps)?.sqrt()?)?;
        let shift = (self.bias.as_tensor() - (&mean * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape(shape)?)?
            .broadcast_add(&shift.reshape(shape)?)?)
    }
}

/// Group normalisation; the group count is the largest of 8, 4, 2, 1
/// dividing the channel count.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Var,
    bias: Var,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize, pb: ParamBuilder) -> Result<Self> {
        let groups = [8, 4, 2, 1]
            .into_iter()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Ok(Self {
            weight: pb.constant("weight", &[channels], 1.0)?,
            bias: pb.constant("bias", &[channels], 0.0)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Normalisation slot of a convolution block.
#[derive(Debug, Clone)]
pub enum Norm2d {
    Batch(BatchNorm2d),
    Group(GroupNorm),
    Identity,
}

impl Norm2d {
    pub fn new(kind: Normalization, channels: usize, pb: ParamBuilder) -> Result<Self> {
        Ok(match kind {
            Normalization::Batch => Norm2d::Batch(BatchNorm2d::new(channels, pb)?),
            Normalization::Group => Norm2d::Group(GroupNorm::new(channels, pb)?),
            Normalization::None => Norm2d::Identity,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Norm2d::Batch(bn) => bn.forward(x, mode),
            Norm2d::Group(gn) => gn.forward(x),
            Norm2d::Identity => Ok(x.clone()),
        }
    }
}

/// Logistic sigmoid through `tanh`, which stays finite (and has finite
/// gradients) for arbitrarily large logits.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax along axis 1 of a `[B, K, H, W]` logit map.
pub fn log_softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Interpolation matrix `[out, in]` for 1-D linear resampling with
/// half-pixel centres (align-corners off). Rows sum to one.
pub fn linear_resize_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0f32; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of a `[B, C, H, W]` map to `(out_h, out_w)`, built from
/// two interpolation-matrix products so that it is differentiable.
/// Returns the input untouched when the size already matches.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("cannot resize to an empty map"));
    }
    let dev = x.device();
    let mut y = x.clone();
    if w != out_w {
        let rw = Tensor::from_vec(linear_resize_matrix(w, out_w), (out_w, w), dev)?;
        y = y.broadcast_matmul(&rw.t()?)?;
    }
    if h != out_h {
        let rh = Tensor::from_vec(linear_resize_matrix(h, out_h), (out_h, h), dev)?;
        y = rh.broadcast_matmul(&y)?;
    }
    Ok(y)
}

/// Non-overlapping max pooling by an integer factor.
pub fn max_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "max-pool factor {factor} does not divide {h}x{w}"
        )));
    }
    Ok(x.max_pool2d(factor)?)
}

/// How a map was brought to a target resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Identity,
    MaxPool(usize),
    Upsample(usize),
    /// No integer factor relates the two sizes; bilinear interpolation used.
    Interpolated,
}

/// Bring `x` to `(th, tw)`: max-pool when shrinking by an integer factor,
/// bilinear upsample when growing, interpolation otherwise.
pub fn resample_to(x: &Tensor, th: usize, tw: usize) -> Result<(Tensor, Resampling)> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (th, tw) {
        return Ok((x.clone(), Resampling::Identity));
    }
    if h > th && w > tw && h % th == 0 && w % tw == 0 && h / th == w / tw {
        let f = h / th;
        return Ok((max_pool(x, f)?, Resampling::MaxPool(f)));
    }
    if th > h && tw > w && th % h == 0 && tw % w == 0 && th / h == tw / w {
        return Ok((resize_bilinear(x, th, tw)?, Resampling::Upsample(th / h)));
    }
    log::warn!("resampling {h}x{w} -> {th}x{tw} has no integer factor; interpolating");
    Ok((resize_bilinear(x, th, tw)?, Resampling::Interpolated))
}

/// Zero tensor helper on the CPU device.
pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DType::F32, &Device::Cpu)?)
}

pub(crate) fn expect_rank4(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    x.dims4()
        .map_err(|_| Error::shape(format!("{what}: expected 4 axes, got {:?}", x.dims())))
}
