//! Quick self-check of the library's structural invariants, used by the
//! `verify` subcommand. Every check is cheap enough to run on a laptop in
//! seconds.

use std::fmt;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention_gates::{AttentionGate, AttentionGateSpec};
use crate::checkpoint::{self, TrainingState};
use crate::config::{AblationFlags, ModelConfig};
use crate::data::{draw_augment, make_folds, sample_rng, AugmentConfig};
use crate::error::Result;
use crate::metrics::{dice, hausdorff, hd95, iou, Spacing};
use crate::model::build_model;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::train::ablation_param_counts;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// A small configuration that builds and runs in milliseconds.
pub fn tiny_config(num_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(num_classes);
    cfg.input_size = (32, 32);
    cfg.base_width = 4;
    cfg.pvt.channels = [4, 8, 8, 16];
    cfg.pvt.heads = [1, 1, 2, 2];
    cfg.vit.heads = 2;
    cfg
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |_| rng.random_bool(p))
}

fn output_shapes() -> Result<(bool, String)> {
    let mut ok = true;
    for (_, flags) in AblationFlags::table_rows() {
        let cfg = ModelConfig { flags, ..tiny_config(3) };
        let model = build_model(&cfg)?;
        let x = Tensor::randn(0f32, 1., (2, 1, 32, 32), &Device::Cpu)?;
        ok &= model.forward(&x, Mode::Eval)?.dims() == [2, 3, 32, 32];
    }
    Ok((ok, "logits [B, K, H, W] for all four flag rows".into()))
}

fn token_grid() -> Result<(bool, String)> {
    let spec = ModelConfig::reference(9).vit_spec();
    Ok((
        spec.token_grid == (14, 14) && spec.token_count() == 196,
        format!("{:?} grid, {} tokens at 224x224", spec.token_grid, spec.token_count()),
    ))
}

fn gate_bounds(seed: u64) -> Result<(bool, String)> {
    let store = ParamStore::new(seed);
    let ag = AttentionGate::new(AttentionGateSpec::new(8, 8), store.root())?;
    let mut strict = true;
    for _ in 0..20 {
        let g = (Tensor::randn(0f32, 1., (1, 8, 8, 8), &Device::Cpu)? * 10.0)?;
        let x = (Tensor::randn(0f32, 1., (1, 8, 8, 8), &Device::Cpu)? * 10.0)?;
        let (_, a) = ag.forward_with_coefficients(&g, &x)?;
        let v: Vec<f32> = a.flatten_all()?.to_vec1()?;
        strict &= v.iter().all(|&a| a > 0.0 && a < 1.0);
    }
    store.assign("psi.weight", &Tensor::zeros((1, 8, 1, 1), candle_core::DType::F32, &Device::Cpu)?)?;
    store.assign("psi.bias", &Tensor::zeros(1, candle_core::DType::F32, &Device::Cpu)?)?;
    let g = Tensor::randn(0f32, 1., (1, 8, 8, 8), &Device::Cpu)?;
    let x = Tensor::randn(0f32, 1., (1, 8, 8, 8), &Device::Cpu)?;
    let diff = (ag.forward(&g, &x)? - (&x * 0.5)?)?.abs()?.max_all()?.to_scalar::<f32>()?;
    Ok((
        strict && diff <= 1e-6,
        format!("coefficients strictly in (0,1); zero psi gives 0.5x (max error {diff:.1e})"),
    ))
}

fn metric_identities(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    let mut ordered = true;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let a = random_mask(&mut rng, h, w, 0.3);
        let b = random_mask(&mut rng, h, w, 0.3);
        let d = dice(a.view(), b.view())?;
        let j = iou(a.view(), b.view())?;
        worst = worst.max((j - d / (2.0 - d)).abs());
        let h95 = hd95(a.view(), b.view(), Spacing::default())?;
        ordered &= h95 == hd95(b.view(), a.view(), Spacing::default())?;
        if a.iter().any(|&v| v) && b.iter().any(|&v| v) {
            ordered &= h95 <= hausdorff(a.view(), b.view(), Spacing::default())?;
        }
    }
    Ok((
        worst <= 1e-12 && ordered,
        format!("j = d/(2-d) within {worst:.1e}; hd95 symmetric and <= Hausdorff"),
    ))
}

fn ablation_accounting() -> Result<(bool, String)> {
    let rows = ablation_param_counts(&tiny_config(3))?;
    let full = rows[3].param_count;
    let ok = rows[..3].iter().all(|r| r.param_count < full);
    let counts: Vec<String> = rows.iter().map(|r| format!("{}={}", r.label, r.param_count)).collect();
    Ok((ok, counts.join(", ")))
}

fn augmentation_rates(seed: u64) -> Result<(bool, String)> {
    let cfg = AugmentConfig::default();
    let n = 10_000u64;
    let (mut rot, mut hf, mut vf) = (0u64, 0u64, 0u64);
    for i in 0..n {
        let r = draw_augment(&cfg, &mut sample_rng(seed, 0, i));
        rot += u64::from(r.angle.is_some());
        hf += u64::from(r.hflip);
        vf += u64::from(r.vflip);
    }
    let within = |count: u64, p: f64| {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        ((count as f64 / n as f64) - p).abs() <= 3.0 * sigma
    };
    Ok((
        within(rot, cfg.p_rotate) && within(hf, cfg.p_hflip) && within(vf, cfg.p_vflip),
        format!("rotate {rot}, hflip {hf}, vflip {vf} of {n}"),
    ))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let model = build_model(&tiny_config(2))?;
    let x = Tensor::randn(0f32, 1., (1, 1, 32, 32), &Device::Cpu)?;
    let state = TrainingState {
        epoch: 0,
        seed: 0,
        optimizer: None,
        train_config: None,
    };
    let bytes = checkpoint::to_bytes(&model, &state)?;
    let (back, st) = checkpoint::from_bytes(&bytes)?;
    let a: Vec<f32> = model.forward(&x, Mode::Eval)?.flatten_all()?.to_vec1()?;
    let b: Vec<f32> = back.forward(&x, Mode::Eval)?.flatten_all()?.to_vec1()?;
    let same_bytes = checkpoint::to_bytes(&back, &st)? == bytes;
    Ok((a == b && same_bytes, format!("{} bytes, forward outputs identical", bytes.len())))
}

fn fold_sizes(seed: u64) -> Result<(bool, String)> {
    let groups: Vec<String> = (0..23).map(|i| format!("scan{i}")).collect();
    let folds = make_folds(&groups, 5, seed)?;
    let mut sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok((sizes == [5, 5, 5, 4, 4], format!("23 groups into 5 folds: {sizes:?}")))
}

/// Run every check with the given seed.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check("output shapes", output_shapes()),
        check("bottleneck token grid", token_grid()),
        check("attention gate bounds", gate_bounds(seed)),
        check("metric identities", metric_identities(seed)),
        check("ablation parameter accounting", ablation_accounting()),
        check("augmentation rates", augmentation_rates(seed)),
        check("checkpoint round trip", checkpoint_round_trip()),
        check("grouped fold sizes", fold_sizes(seed)),
    ]
}
