//! Token-mixing bottleneck: a plain pre-norm transformer encoder over the
//! deepest encoder grid (14x14 = 196 tokens at 224x224 input).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::transformer::{map_to_tokens, tokens_to_map, LayerShape, TransformerLayer};
use crate::error::{Error, Result};
use crate::nn::{expect_rank4, Conv2d, ConvOptions, LayerNorm};
use crate::params::ParamBuilder;

/// Token grid of the bottleneck at the reference 224x224 input.
pub const REFERENCE_TOKEN_GRID: (usize, usize) = (14, 14);
pub const REFERENCE_TOKEN_COUNT: usize = 196;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTBottleneckSpec {
    pub in_channels: usize,
    pub token_grid: (usize, usize),
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl ViTBottleneckSpec {
    /// ViT-Base width, depth and heads on the reference grid.
    pub fn base(in_channels: usize) -> Self {
        Self {
            in_channels,
            token_grid: REFERENCE_TOKEN_GRID,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
        }
    }

    pub fn token_count(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_dim == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::config(format!("bottleneck sizes must be positive: {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "bottleneck width {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.token_count() == 0 {
            return Err(Error::config("bottleneck token grid is empty"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("bottleneck mlp ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ViTOutput {
    /// `[B, embed_dim, gh, gw]`
    pub map: Tensor,
    pub token_count: usize,
    /// Per-layer attention weights `[B, heads, N, N]`.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ViTBottleneck {
    spec: ViTBottleneckSpec,
    proj: Conv2d,
    pos_embed: candle_core::Var,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
}

impl ViTBottleneck {
    pub fn new(spec: ViTBottleneckSpec, pb: ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let e = spec.embed_dim;
        let shape = LayerShape {
            dim: e,
            heads: spec.heads,
            mlp_ratio: spec.mlp_ratio,
            sr_ratio: 1,
            depthwise_mlp: false,
        };
        Ok(Self {
            spec,
            proj: Conv2d::new(spec.in_channels, e, 1, ConvOptions::default(), pb.pp("proj"))?,
            pos_embed: pb.normal("pos_embed", &[1, spec.token_count(), e], 0.02)?,
            layers: (0..spec.depth)
                .map(|d| TransformerLayer::new(shape, pb.pp(format!("layer{d}"))))
                .collect::<Result<Vec<_>>>()?,
            norm: LayerNorm::new(e, pb.pp("norm"))?,
        })
    }

    pub fn spec(&self) -> &ViTBottleneckSpec {
        &self.spec
    }

    pub fn forward_with_attention(&self, x: &Tensor) -> Result<ViTOutput> {
        let (_, c, h, w) = expect_rank4(x, "bottleneck input")?;
        if (h, w) != self.spec.token_grid {
            return Err(Error::shape(format!(
                "bottleneck expects a {:?} grid, got {h}x{w}",
                self.spec.token_grid
            )));
        }
        if c != self.spec.in_channels {
            return Err(Error::config(format!(
                "bottleneck expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        let tokens = map_to_tokens(&self.proj.forward(x)?)?;
        let token_count = tokens.dim(1)?;
        let mut tokens = tokens.broadcast_add(&self.pos_embed)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (t, a) = layer.forward_with_weights(&tokens, h, w)?;
            tokens = t;
            attention.push(a);
        }
        let map = tokens_to_map(&self.norm.forward(&tokens)?, h, w)?;
        Ok(ViTOutput {
            map,
            token_count,
            attention,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(x)?.map)
    }
}
