//! Four-stage pyramid vision transformer branch.
//!
//! Each stage embeds the previous map with an overlapping strided
//! convolution (7x7/4 for the first stage, 3x3/2 afterwards), runs a stack
//! of pre-norm layers whose attention reads keys and values from a grid
//! shrunk by the stage's reduction ratio, and emits a layer-normalised map.
//! The feed-forward part carries a depthwise 3x3 convolution between its two
//! linear maps. Output strides are 4, 8, 16 and 32.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::transformer::{map_to_tokens, tokens_to_map, LayerShape, TransformerLayer};
use crate::error::{Error, Result};
use crate::nn::{expect_rank4, Conv2d, ConvOptions, LayerNorm};
use crate::params::ParamBuilder;

pub const PVT_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvtSpec {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratios: [f64; 4],
    pub sr_ratios: [usize; 4],
}

impl PvtSpec {
    /// Widths of the b1 variant: 64/128/320/512.
    pub fn reference() -> Self {
        Self {
            channels: [64, 128, 320, 512],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 5, 8],
            mlp_ratios: [8.0, 8.0, 4.0, 4.0],
            sr_ratios: [8, 4, 2, 1],
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            mlp_ratios: [4.0, 4.0, 4.0, 4.0],
            sr_ratios: [8, 4, 2, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            let (c, h) = (self.channels[i], self.heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return Err(Error::config(format!(
                    "pvt stage {i}: width {c} must be a positive multiple of {h} heads"
                )));
            }
            if self.depths[i] == 0 || self.sr_ratios[i] == 0 || self.mlp_ratios[i] <= 0.0 {
                return Err(Error::config(format!(
                    "pvt stage {i}: depth, reduction ratio and mlp ratio must be positive"
                )));
            }
        }
        if self.channels.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::config(format!(
                "pvt stage widths must be non-decreasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Stage outputs `t_1..t_4`.
#[derive(Debug, Clone)]
pub struct TransformerStages {
    pub stages: Vec<Tensor>,
    pub strides: [usize; 4],
    pub channels: [usize; 4],
}

#[derive(Debug, Clone)]
struct PvtStage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
}

impl PvtStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.embed.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        let mut tokens = self.embed_norm.forward(&map_to_tokens(&y)?)?;
        for layer in &self.layers {
            tokens = layer.forward(&tokens, h, w)?;
        }
        tokens_to_map(&self.norm.forward(&tokens)?, h, w)
    }
}

#[derive(Debug, Clone)]
pub struct PvtBranch {
    spec: PvtSpec,
    stages: Vec<PvtStage>,
}

impl PvtBranch {
    pub fn new(in_channels: usize, spec: PvtSpec, pb: ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = in_channels;
        for i in 0..4 {
            let pb = pb.pp(format!("stage{}", i + 1));
            let (k, s) = if i == 0 { (7, 4) } else { (3, 2) };
            let c = spec.channels[i];
            let embed = Conv2d::new(
                c_in,
                c,
                k,
                ConvOptions {
                    stride: s,
                    padding: k / 2,
                    ..Default::default()
                },
                pb.pp("patch_embed"),
            )?;
            let shape = LayerShape {
                dim: c,
                heads: spec.heads[i],
                mlp_ratio: spec.mlp_ratios[i],
                sr_ratio: spec.sr_ratios[i],
                depthwise_mlp: true,
            };
            let layers = (0..spec.depths[i])
                .map(|d| TransformerLayer::new(shape, pb.pp(format!("layer{d}"))))
                .collect::<Result<Vec<_>>>()?;
            stages.push(PvtStage {
                embed,
                embed_norm: LayerNorm::new(c, pb.pp("embed_norm"))?,
                layers,
                norm: LayerNorm::new(c, pb.pp("norm"))?,
            });
            c_in = c;
        }
        Ok(Self { spec, stages })
    }

    pub fn spec(&self) -> &PvtSpec {
        &self.spec
    }

    pub fn forward(&self, image: &Tensor) -> Result<TransformerStages> {
        let (_, _, h, w) = expect_rank4(image, "transformer branch input")?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::InputSize(format!(
                "transformer branch input {h}x{w} must be a positive multiple of 32"
            )));
        }
        let mut stages = Vec::with_capacity(4);
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?;
            stages.push(x.clone());
        }
        Ok(TransformerStages {
            stages,
            strides: PVT_STRIDES,
            channels: self.spec.channels,
        })
    }
}
