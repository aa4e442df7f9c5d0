//! Transformer building blocks shared by the pyramid transformer branch and
//! the token bottleneck.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Conv2d, ConvOptions, LayerNorm, Linear};
use crate::params::ParamBuilder;

/// `[B, C, H, W] -> [B, H*W, C]`
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H*W, C] -> [B, C, H, W]`
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens cannot form a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Multi-head self-attention whose keys and values are optionally computed
/// on a spatially reduced copy of the token grid (strided conv + norm).
#[derive(Debug, Clone)]
pub struct Attention {
    heads: usize,
    head_dim: usize,
    query: Linear,
    key_value: Linear,
    proj: Linear,
    reduction: Option<(usize, Conv2d, LayerNorm)>,
}

impl Attention {
    pub fn new(dim: usize, heads: usize, sr_ratio: usize, pb: ParamBuilder) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        if sr_ratio == 0 {
            return Err(Error::config("spatial reduction ratio must be positive"));
        }
        let reduction = if sr_ratio > 1 {
            let conv = Conv2d::new(
                dim,
                dim,
                sr_ratio,
                ConvOptions {
                    stride: sr_ratio,
                    ..Default::default()
                },
                pb.pp("sr"),
            )?;
            Some((sr_ratio, conv, LayerNorm::new(dim, pb.pp("sr_norm"))?))
        } else {
            None
        };
        Ok(Self {
            heads,
            head_dim: dim / heads,
            query: Linear::new(dim, dim, pb.pp("q"))?,
            key_value: Linear::new(dim, 2 * dim, pb.pp("kv"))?,
            proj: Linear::new(dim, dim, pb.pp("proj"))?,
            reduction,
        })
    }

    /// Attention output and the `[B, heads, N, M]` weight matrix.
    pub fn forward_with_weights(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let (nh, hd) = (self.heads, self.head_dim);
        let q = self
            .query
            .forward(x)?
            .reshape((b, n, nh, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let kv_src = match &self.reduction {
            Some((ratio, conv, norm)) => {
                if h % ratio != 0 || w % ratio != 0 {
                    return Err(Error::shape(format!(
                        "{h}x{w} grid not divisible by reduction ratio {ratio}"
                    )));
                }
                let reduced = conv.forward(&tokens_to_map(x, h, w)?)?;
                norm.forward(&map_to_tokens(&reduced)?)?
            }
            None => x.clone(),
        };
        let m = kv_src.dim(1)?;
        let kv = self
            .key_value
            .forward(&kv_src)?
            .reshape((b, m, 2, nh, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let k = kv.get(0)?.contiguous()?;
        let v = kv.get(1)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let logits = (q.matmul(&k.t()?)? * scale)?;
        let weights = softmax_last(&logits)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        Ok((self.proj.forward(&out)?, weights))
    }
}

/// Two-layer perceptron with GELU; optionally a depthwise 3x3 conv on the
/// hidden grid between the two layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    depthwise: Option<Conv2d>,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, depthwise: bool, pb: ParamBuilder) -> Result<Self> {
        let depthwise = if depthwise {
            Some(Conv2d::new(
                hidden,
                hidden,
                3,
                ConvOptions {
                    padding: 1,
                    groups: hidden,
                    ..Default::default()
                },
                pb.pp("dwconv"),
            )?)
        } else {
            None
        };
        Ok(Self {
            fc1: Linear::new(dim, hidden, pb.pp("fc1"))?,
            depthwise,
            fc2: Linear::new(hidden, dim, pb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let mut y = self.fc1.forward(x)?;
        if let Some(dw) = &self.depthwise {
            y = map_to_tokens(&dw.forward(&tokens_to_map(&y, h, w)?)?)?;
        }
        self.fc2.forward(&y.gelu_erf()?)
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub sr_ratio: usize,
    pub depthwise_mlp: bool,
}

impl TransformerLayer {
    pub fn new(shape: LayerShape, pb: ParamBuilder) -> Result<Self> {
        let hidden = ((shape.dim as f64) * shape.mlp_ratio).round() as usize;
        if hidden == 0 {
            return Err(Error::config(format!("mlp ratio {} gives an empty hidden layer", shape.mlp_ratio)));
        }
        Ok(Self {
            norm1: LayerNorm::new(shape.dim, pb.pp("norm1"))?,
            attn: Attention::new(shape.dim, shape.heads, shape.sr_ratio, pb.pp("attn"))?,
            norm2: LayerNorm::new(shape.dim, pb.pp("norm2"))?,
            mlp: Mlp::new(shape.dim, hidden, shape.depthwise_mlp, pb.pp("mlp"))?,
        })
    }

    pub fn forward_with_weights(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (a, weights) = self.attn.forward_with_weights(&self.norm1.forward(x)?, h, w)?;
        let x = (x + a)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok(((x + m)?, weights))
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, h, w)?.0)
    }
}
