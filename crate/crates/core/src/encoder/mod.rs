//! The three-branch encoder.
//!
//! Data flow for an `H x W` input:
//!
//! ```text
//! image ──► stem DConvB (H)                         x_0
//!   │        for level i = 1..4, resolution H / 2^i:
//!   │          main_i  = maxpool2(x_{i-1})
//!   │          fused_i = DAG(PConvB_i(P_i), main_i, t_i)
//!   │          x_i     = DConvB(fused_i)
//!   ├─► pyramid P_1..P_4 (H/2 .. H/16)
//!   └─► transformer stages t_1..t_4 (H/4 .. H/32, upsampled x2 inside the DAG)
//!
//! bottleneck: concat(x_4, maxpool2(x_3)) ─► ViT (H/16 grid) ─► x_6 ─► DConvB ─► x_7
//! ```

pub mod pvt;
pub mod pyramid;
pub mod transformer;
pub mod vit;

use candle_core::Tensor;

use crate::attention_gates::{DagInputs, DualAttentionGate, DualAttentionGateSpec};
use crate::config::ModelConfig;
use crate::conv_blocks::{DConvB, DConvBSpec, PConvB, PConvBSpec};
use crate::error::{Error, Result};
use crate::nn::{expect_rank4, max_pool, Mode};
use crate::params::ParamBuilder;

pub use pvt::{PvtBranch, PvtSpec, TransformerStages, PVT_STRIDES};
pub use pyramid::{build_pyramid, PyramidInputs};
pub use vit::{ViTBottleneck, ViTBottleneckSpec, ViTOutput, REFERENCE_TOKEN_COUNT, REFERENCE_TOKEN_GRID};

#[derive(Debug, Clone)]
enum Bottleneck {
    Tokens { vit: ViTBottleneck, out: DConvB },
    Bypass { out: DConvB },
}

/// Everything the encoder produces; the decoder reads the skips and `x_7`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Full-resolution stem features `x_0`.
    pub stem: Tensor,
    /// Dual-gate outputs per level (resolution `H / 2^i`).
    pub fused: Vec<Tensor>,
    /// Main-branch features `x_1..x_4`.
    pub levels: Vec<Tensor>,
    /// Bottleneck transformer output `x_6`, when the bottleneck is enabled.
    pub tokens_out: Option<Tensor>,
    /// `x_7`.
    pub bottleneck: Tensor,
    pub pyramid: Option<PyramidInputs>,
    pub transformer: Option<TransformerStages>,
    /// Number of tokens processed by the bottleneck transformer.
    pub token_count: Option<usize>,
    /// Attention-gate coefficient maps, per level.
    pub gate_coefficients: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    input_size: (usize, usize),
    in_channels: usize,
    stem: DConvB,
    pyramid: Option<Vec<PConvB>>,
    pvt: Option<PvtBranch>,
    gates: Vec<DualAttentionGate>,
    level_blocks: Vec<DConvB>,
    bottleneck: Bottleneck,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let norm = cfg.normalization;
        let widths = cfg.widths();
        let b = cfg.base_width;
        let (h, w) = cfg.input_size;

        let stem = DConvB::new(DConvBSpec::new(cfg.in_channels, b, norm), pb.pp("stem"))?;
        let pyramid = if cfg.flags.pyr {
            Some(
                (1..=4)
                    .map(|level| {
                        PConvB::new(
                            PConvBSpec::doubling(level, cfg.in_channels, b, norm),
                            pb.pp(format!("pyramid.level{level}")),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let pvt = if cfg.flags.pvt {
            Some(PvtBranch::new(cfg.in_channels, cfg.pvt.clone(), pb.pp("pvt"))?)
        } else {
            None
        };

        let inputs = DagInputs {
            pyramid: cfg.flags.pyr,
            transformer: cfg.flags.pvt,
        };
        let mut gates = Vec::with_capacity(4);
        let mut level_blocks = Vec::with_capacity(4);
        let mut main_c = b;
        for i in 0..4 {
            let mut spec = DualAttentionGateSpec::new(
                b << i,
                main_c,
                cfg.pvt.channels[i],
                (h >> (i + 1), w >> (i + 1)),
            );
            spec.wiring = cfg.dag_wiring;
            let gate = DualAttentionGate::new(spec, inputs, pb.pp(format!("dag{}", i + 1)))?;
            let block = DConvB::new(
                DConvBSpec::new(gate.out_channels(), widths[i], norm),
                pb.pp(format!("level{}", i + 1)),
            )?;
            main_c = widths[i];
            gates.push(gate);
            level_blocks.push(block);
        }

        let bott_in = cfg.bottleneck_in_channels();
        let bottleneck = if cfg.flags.vit {
            let spec = cfg.vit_spec();
            let vit = ViTBottleneck::new(spec, pb.pp("vit"))?;
            let out = DConvB::new(DConvBSpec::new(spec.embed_dim, widths[3], norm), pb.pp("bottleneck"))?;
            Bottleneck::Tokens { vit, out }
        } else {
            let out = DConvB::new(DConvBSpec::new(bott_in, widths[3], norm), pb.pp("bottleneck"))?;
            Bottleneck::Bypass { out }
        };

        Ok(Self {
            input_size: cfg.input_size,
            in_channels: cfg.in_channels,
            stem,
            pyramid,
            pvt,
            gates,
            level_blocks,
            bottleneck,
        })
    }

    /// Output width of each level's dual gate.
    pub fn fused_channels(&self) -> Vec<usize> {
        self.gates.iter().map(DualAttentionGate::out_channels).collect()
    }

    pub fn vit(&self) -> Option<&ViTBottleneck> {
        match &self.bottleneck {
            Bottleneck::Tokens { vit, .. } => Some(vit),
            Bottleneck::Bypass { .. } => None,
        }
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<EncoderOutput> {
        let (_, c, h, w) = expect_rank4(image, "encoder input")?;
        if (h, w) != self.input_size {
            return Err(Error::shape(format!(
                "encoder built for {:?} input, got {h}x{w}",
                self.input_size
            )));
        }
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "encoder built for {} channels, got {c}",
                self.in_channels
            )));
        }

        let pyramid_inputs = match &self.pyramid {
            Some(_) => Some(build_pyramid(image)?),
            None => None,
        };
        let pyramid_feats = match (&self.pyramid, &pyramid_inputs) {
            (Some(blocks), Some(p)) => Some(
                blocks
                    .iter()
                    .zip(&p.levels)
                    .map(|(b, l)| b.forward(l, mode))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let stages = match &self.pvt {
            Some(pvt) => Some(pvt.forward(image)?),
            None => None,
        };

        let stem = self.stem.forward(image, mode)?;
        let mut prev = stem.clone();
        let mut fused = Vec::with_capacity(4);
        let mut levels = Vec::with_capacity(4);
        let mut gate_coefficients = Vec::with_capacity(4);
        for i in 0..4 {
            let main = max_pool(&prev, 2)?;
            let pyr = pyramid_feats.as_ref().map(|p| &p[i]);
            let trans = stages.as_ref().map(|s| &s.stages[i]);
            let out = self.gates[i].forward(pyr, &main, trans)?;
            let x = self.level_blocks[i].forward(&out.fused, mode)?;
            fused.push(out.fused);
            gate_coefficients.push(out.alphas);
            levels.push(x.clone());
            prev = x;
        }

        let joined = Tensor::cat(&[&levels[3], &max_pool(&levels[2], 2)?], 1)?;
        let (tokens_out, token_count, bottleneck) = match &self.bottleneck {
            Bottleneck::Tokens { vit, out } => {
                let v = vit.forward_with_attention(&joined)?;
                let x7 = out.forward(&v.map, mode)?;
                (Some(v.map), Some(v.token_count), x7)
            }
            Bottleneck::Bypass { out } => (None, None, out.forward(&joined, mode)?),
        };

        Ok(EncoderOutput {
            stem,
            fused,
            levels,
            tokens_out,
            bottleneck,
            pyramid: pyramid_inputs,
            transformer: stages,
            token_count,
            gate_coefficients,
        })
    }
}
