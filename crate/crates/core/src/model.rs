//! Full segmentation network: encoder, four-stage decoder, classification
//! head, and the training loss.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SkipMode};
use crate::conv_blocks::{DConvB, DConvBSpec};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::metrics::MaskBatch;
use crate::nn::{expect_rank4, log_softmax_channels, resize_bilinear, Conv2d, ConvOptions, Mode};
use crate::params::{ParamBuilder, ParamStore};

/// Which encoder features a decoder stage concatenates, by level
/// (`0` is the full-resolution stem).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SkipSource {
    Stem,
    Fused(usize),
    Main(usize),
}

#[derive(Debug, Clone)]
struct DecoderStage {
    skips: Vec<SkipSource>,
    block: DConvB,
}

#[derive(Debug, Clone)]
struct Decoder {
    stages: Vec<DecoderStage>,
    head: Conv2d,
}

impl Decoder {
    fn new(cfg: &ModelConfig, fused_channels: &[usize], pb: ParamBuilder) -> Result<Self> {
        let widths = cfg.widths();
        let mut current = widths[3];
        let mut stages = Vec::with_capacity(4);
        for level in (0..4).rev() {
            let skips = skip_sources(cfg.skip_mode, level);
            let skip_c: usize = skips
                .iter()
                .map(|s| match *s {
                    SkipSource::Stem => widths[0],
                    SkipSource::Fused(l) => fused_channels[l - 1],
                    SkipSource::Main(l) => widths[l - 1],
                })
                .sum();
            let out = widths[level.saturating_sub(1)];
            let block = DConvB::new(
                DConvBSpec::new(current + skip_c, out, cfg.normalization),
                pb.pp(format!("stage{}", 4 - level)),
            )?;
            stages.push(DecoderStage { skips, block });
            current = out;
        }
        let head = Conv2d::new(current, cfg.num_classes, 1, ConvOptions::default(), pb.pp("head"))?;
        Ok(Self { stages, head })
    }

    fn forward(&self, enc: &EncoderOutput, mode: Mode) -> Result<Tensor> {
        let mut x = enc.bottleneck.clone();
        for stage in &self.stages {
            let (_, _, h, w) = x.dims4()?;
            let up = resize_bilinear(&x, 2 * h, 2 * w)?;
            let mut parts = vec![up];
            for s in &stage.skips {
                parts.push(match *s {
                    SkipSource::Stem => enc.stem.clone(),
                    SkipSource::Fused(l) => enc.fused[l - 1].clone(),
                    SkipSource::Main(l) => enc.levels[l - 1].clone(),
                });
            }
            let joined = if parts.len() == 1 {
                parts.pop().expect("one part")
            } else {
                Tensor::cat(&parts, 1)?
            };
            x = stage.block.forward(&joined, mode)?;
        }
        self.head.forward(&x)
    }
}

fn skip_sources(mode: SkipMode, level: usize) -> Vec<SkipSource> {
    match (mode, level) {
        (SkipMode::DualFeature, 0) => vec![SkipSource::Stem],
        (SkipMode::DualFeature, l) => vec![SkipSource::Fused(l), SkipSource::Main(l)],
        (SkipMode::TwoLevels, l @ (1 | 2)) => vec![SkipSource::Main(l)],
        (SkipMode::TwoLevels, _) => Vec::new(),
    }
}

/// The assembled network together with the store that owns its weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

/// Validate `config` and build a freshly initialised model. Initialisation
/// is a pure function of `config.init_seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let store = ParamStore::new(config.init_seed);
    let root = store.root();
    let encoder = Encoder::new(config, root.pp("encoder"))?;
    let decoder = Decoder::new(config, &encoder.fused_channels(), root.pp("decoder"))?;
    Ok(Model {
        config: config.clone(),
        store,
        encoder,
        decoder,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.names()
    }

    fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        match &self.config.input_stats {
            None => Ok(image.clone()),
            Some(stats) => {
                let c = stats.mean.len();
                let dev = image.device();
                let mean = Tensor::from_slice(&stats.mean, (1, c, 1, 1), dev)?;
                let std = Tensor::from_slice(&stats.std, (1, c, 1, 1), dev)?;
                Ok(image.broadcast_sub(&mean)?.broadcast_div(&std)?)
            }
        }
    }

    /// Logits `[B, num_classes, H, W]` plus every intermediate encoder map.
    pub fn forward_detailed(&self, image: &Tensor, mode: Mode) -> Result<(Tensor, EncoderOutput)> {
        let (_, c, h, w) = expect_rank4(image, "model input")?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if (h, w) != self.config.input_size {
            return Err(Error::InputSize(format!(
                "model built for {:?}, got {h}x{w}",
                self.config.input_size
            )));
        }
        let x = self.normalize(image)?;
        let enc = self.encoder.forward(&x, mode)?;
        let logits = self.decoder.forward(&enc, mode)?;
        Ok((logits, enc))
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_detailed(image, mode)?.0)
    }
}

/// Relative weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

/// Smoothing constant of the soft Dice term.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
}

/// One-hot encoding `[B, K, H, W]` of a mask batch.
pub fn one_hot(target: &MaskBatch) -> Result<Tensor> {
    let (b, h, w) = target.dims();
    let k = target.num_classes();
    let mut v = vec![0f32; b * k * h * w];
    for ((bi, y, x), &cls) in target.data().indexed_iter() {
        v[((bi * k + cls as usize) * h + y) * w + x] = 1.0;
    }
    Ok(Tensor::from_vec(v, (b, k, h, w), &candle_core::Device::Cpu)?)
}

/// `1 - mean_k (2 Σ p·t + ε) / (Σ p + Σ t + ε)`, sums over batch and pixels.
pub fn soft_dice_loss(probs: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    if probs.dims() != one_hot.dims() {
        return Err(Error::shape(format!(
            "dice inputs differ: {:?} vs {:?}",
            probs.dims(),
            one_hot.dims()
        )));
    }
    let per_class = |t: &Tensor| -> Result<Tensor> { Ok(t.sum(3)?.sum(2)?.sum(0)?) };
    let inter = per_class(&(probs * one_hot)?)?;
    let denom = (per_class(probs)? + per_class(one_hot)?)?;
    let dice = ((inter * 2.0)? + DICE_EPS)?.div(&(denom + DICE_EPS)?)?;
    Ok((1.0 - dice.mean_all()?)?)
}

/// Weighted cross-entropy plus soft Dice. Targets outside
/// `[0, num_classes)` are rejected when the [`MaskBatch`] is built.
pub fn compute_loss(logits: &Tensor, target: &MaskBatch, weights: LossWeights) -> Result<LossTerms> {
    let (b, k, h, w) = expect_rank4(logits, "logits")?;
    if (b, h, w) != target.dims() || k != target.num_classes() {
        return Err(Error::shape(format!(
            "logits {:?} do not match targets {:?} with {} classes",
            logits.dims(),
            target.dims(),
            target.num_classes()
        )));
    }
    let oh = one_hot(target)?;
    let logp = log_softmax_channels(logits)?;
    let ce = (logp.mul(&oh)?.sum(1)?.mean_all()? * -1.0)?;
    let dice = soft_dice_loss(&logp.exp()?, &oh)?;
    let total = ((&ce * weights.ce)? + (&dice * weights.dice)?)?;
    Ok(LossTerms { total, ce, dice })
}

/// Arg-max class map per image.
pub fn predict_classes(logits: &Tensor) -> Result<Vec<Array2<u8>>> {
    let (b, _, h, w) = expect_rank4(logits, "logits")?;
    let idx = logits.argmax(1)?.to_dtype(DType::U32)?;
    let flat: Vec<u32> = idx.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks(h * w)
        .take(b)
        .map(|c| Array2::from_shape_fn((h, w), |(y, x)| c[y * w + x] as u8))
        .collect())
}
