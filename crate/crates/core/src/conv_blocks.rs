//! Residual double-convolution block (DConvB) and the cascaded pyramid
//! convolution block (PConvB) built from it.
//!
//! A DConvB computes
//!
//! ```text
//! out = relu( norm2(conv3x3_2(relu(norm1(conv3x3_1(x))))) + conv1x1(x) )
//! ```
//!
//! with stride 1 and padding 1, so the spatial size is preserved. The 1x1
//! skip projection carries no normalisation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expect_rank4, Conv2d, ConvOptions, Mode, Norm2d, Normalization};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DConvBSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl DConvBSpec {
    pub fn new(in_channels: usize, out_channels: usize, normalization: Normalization) -> Self {
        Self {
            in_channels,
            out_channels,
            normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(format!(
                "DConvB channels must be positive, got {}->{}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (i, o) = (self.in_channels, self.out_channels);
        let convs = i * o * 9 + o + o * o * 9 + o + i * o + o;
        let norms = match self.normalization {
            Normalization::Batch | Normalization::Group => 2 * 2 * o,
            Normalization::None => 0,
        };
        convs + norms
    }
}

#[derive(Debug, Clone)]
pub struct DConvB {
    spec: DConvBSpec,
    conv1: Conv2d,
    norm1: Norm2d,
    conv2: Conv2d,
    norm2: Norm2d,
    skip: Conv2d,
}

impl DConvB {
    pub fn new(spec: DConvBSpec, pb: ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let same = ConvOptions {
            padding: 1,
            ..Default::default()
        };
        let (i, o) = (spec.in_channels, spec.out_channels);
        Ok(Self {
            spec,
            conv1: Conv2d::new(i, o, 3, same, pb.pp("conv1"))?,
            norm1: Norm2d::new(spec.normalization, o, pb.pp("norm1"))?,
            conv2: Conv2d::new(o, o, 3, same, pb.pp("conv2"))?,
            norm2: Norm2d::new(spec.normalization, o, pb.pp("norm2"))?,
            skip: Conv2d::new(i, o, 1, ConvOptions::default(), pb.pp("skip"))?,
        })
    }

    pub fn spec(&self) -> &DConvBSpec {
        &self.spec
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = expect_rank4(x, "DConvB input")?;
        if c != self.spec.in_channels {
            return Err(Error::config(format!(
                "DConvB expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("DConvB input has an empty spatial axis"));
        }
        let main = self.norm1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let main = self.norm2.forward(&self.conv2.forward(&main)?, mode)?;
        let skip = self.skip.forward(x)?;
        Ok((main + skip)?.relu()?)
    }
}

/// Cascade of `level` DConvBs applied to pyramid input `P_level`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PConvBSpec {
    pub level: usize,
    pub cascade: Vec<DConvBSpec>,
}

impl PConvBSpec {
    /// Geometric doubling: `in -> base -> 2 base -> ... -> 2^(level-1) base`.
    pub fn doubling(
        level: usize,
        in_channels: usize,
        base_width: usize,
        normalization: Normalization,
    ) -> Self {
        let mut cascade = Vec::with_capacity(level);
        let mut c_in = in_channels;
        for k in 0..level {
            let c_out = base_width << k;
            cascade.push(DConvBSpec::new(c_in, c_out, normalization));
            c_in = c_out;
        }
        Self { level, cascade }
    }

    /// The channel chain, e.g. `[3, 32, 64]` for a two-block cascade.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cascade.first().map(|c| c.in_channels).into_iter().collect();
        s.extend(self.cascade.iter().map(|c| c.out_channels));
        s
    }

    pub fn out_channels(&self) -> usize {
        self.cascade.last().map_or(0, |c| c.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.level) {
            return Err(Error::config(format!(
                "pyramid level must be in 1..=4, got {}",
                self.level
            )));
        }
        if self.cascade.len() != self.level {
            return Err(Error::config(format!(
                "PConvB level {} needs {} DConvBs, got {}",
                self.level,
                self.level,
                self.cascade.len()
            )));
        }
        for (k, pair) in self.cascade.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::config(format!(
                    "PConvB level {}: block {k} emits {} channels but block {} expects {}",
                    self.level,
                    pair[0].out_channels,
                    k + 1,
                    pair[1].in_channels
                )));
            }
        }
        self.cascade.iter().try_for_each(DConvBSpec::validate)
    }
}

#[derive(Debug, Clone)]
pub struct PConvB {
    spec: PConvBSpec,
    blocks: Vec<DConvB>,
}

impl PConvB {
    pub fn new(spec: PConvBSpec, pb: ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let blocks = spec
            .cascade
            .iter()
            .enumerate()
            .map(|(k, s)| DConvB::new(*s, pb.pp(format!("block{k}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &PConvBSpec {
        &self.spec
    }

    pub fn forward(&self, p: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = p.clone();
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
        }
        Ok(x)
    }
}
