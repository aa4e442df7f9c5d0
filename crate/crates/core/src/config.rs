//! Model configuration, ablation switches and presets.
//!
//! Configurations are stored as TOML (the canonical text form used for
//! config files and inside checkpoints).

use serde::{Deserialize, Serialize};

use crate::attention_gates::DagWiring;
use crate::encoder::pvt::PvtSpec;
use crate::encoder::vit::ViTBottleneckSpec;
use crate::error::{Error, Result};
use crate::nn::Normalization;

/// The removable encoder components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub pyr: bool,
    pub pvt: bool,
    pub vit: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl AblationFlags {
    pub const ALL: Self = Self {
        pyr: true,
        pvt: true,
        vit: true,
    };

    /// The four ablation rows, in table order, with their labels.
    pub fn table_rows() -> [(&'static str, AblationFlags); 4] {
        [
            ("(1) No Pyramid Path", Self { pyr: false, ..Self::ALL }),
            ("(2) No PVT", Self { pvt: false, ..Self::ALL }),
            ("(3) No ViT", Self { vit: false, ..Self::ALL }),
            ("(4) PAG-TransYnet", Self::ALL),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pyr && !self.pvt {
            return Err(Error::config(
                "flags: disabling both the pyramid and the transformer path leaves no attention gate",
            ));
        }
        Ok(())
    }
}

/// Which encoder features feed each decoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Every stage receives the fused gate output and the main feature of
    /// its level.
    #[default]
    DualFeature,
    /// Only levels 1 and 2 provide a skip (their main feature).
    TwoLevels,
}

/// Settings for the token bottleneck. The grid follows from the input size
/// (`input / 16`); the input width is fixed by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTSettings {
    /// Defaults to the concatenated channel count `12 * base_width`.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

/// Per-channel input normalisation computed over a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub pvt: PvtSpec,
    pub vit: ViTSettings,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default)]
    pub dag_wiring: DagWiring,
    #[serde(default)]
    pub skip_mode: SkipMode,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub input_stats: Option<ChannelStats>,
}

impl ModelConfig {
    /// Reference scale: 224x224 input, widths 64..512, ViT-Base bottleneck
    /// on the 14x14 grid.
    pub fn reference(num_classes: usize) -> Self {
        Self {
            input_size: (224, 224),
            in_channels: 3,
            num_classes,
            base_width: 64,
            pvt: PvtSpec::reference(),
            vit: ViTSettings {
                embed_dim: Some(768),
                depth: 12,
                heads: 12,
                mlp_ratio: 4.0,
            },
            flags: AblationFlags::ALL,
            dag_wiring: DagWiring::Mixed,
            skip_mode: SkipMode::DualFeature,
            normalization: Normalization::Batch,
            init_seed: 0,
            input_stats: None,
        }
    }

    /// Desk-scale preset: 64x64 grayscale input, base width 16. The bottleneck runs on
    /// a 4x4 grid (16 tokens) instead of the reference 196.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            input_size: (64, 64),
            in_channels: 1,
            base_width: 16,
            pvt: PvtSpec::toy(),
            vit: ViTSettings {
                embed_dim: None,
                depth: 1,
                heads: 4,
                mlp_ratio: 2.0,
            },
            ..Self::reference(num_classes)
        }
    }

    /// Main-branch widths of `x_1..x_4`.
    pub fn widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.input_size.0 / 16, self.input_size.1 / 16)
    }

    /// Channels entering the bottleneck: `x_4` concatenated with pooled `x_3`.
    pub fn bottleneck_in_channels(&self) -> usize {
        let w = self.widths();
        w[2] + w[3]
    }

    pub fn vit_spec(&self) -> ViTBottleneckSpec {
        let c = self.bottleneck_in_channels();
        ViTBottleneckSpec {
            in_channels: c,
            token_grid: self.token_grid(),
            embed_dim: self.vit.embed_dim.unwrap_or(c),
            depth: self.vit.depth,
            heads: self.vit.heads,
            mlp_ratio: self.vit.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "input_size: {h}x{w} must be a positive multiple of 32"
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels: must be at least 1"));
        }
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::config(format!(
                "num_classes: {} must lie in 1..=256",
                self.num_classes
            )));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width: must be at least 1"));
        }
        self.flags.validate()?;
        self.pvt
            .validate()
            .map_err(|e| Error::config(format!("pvt: {e}")))?;
        if self.flags.vit {
            self.vit_spec()
                .validate()
                .map_err(|e| Error::config(format!("vit: {e}")))?;
        }
        if let Some(stats) = &self.input_stats {
            if stats.mean.len() != self.in_channels || stats.std.len() != self.in_channels {
                return Err(Error::config("input_stats: one mean/std per input channel required"));
            }
            if stats.std.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::config("input_stats: std must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serialising config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
