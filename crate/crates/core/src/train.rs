//! Training loop, evaluation, the four-row ablation driver and single-image
//! prediction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainingState};
use crate::config::{AblationFlags, ModelConfig};
use crate::data::{apply_augment, draw_augment, make_batch, resize_image, resize_mask, sample_rng, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_masks, MetricsReport, Spacing};
use crate::model::{build_model, compute_loss, predict_classes, LossWeights, Model};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over `epochs`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeviceHint {
    #[default]
    Cpu,
}

impl std::str::FromStr for DeviceHint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" => Ok(DeviceHint::Cpu),
            other => Err(Error::config(format!("device: {other} is not available in this build"))),
        }
    }
}

fn default_eval_every() -> usize {
    1
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Validate every `eval_every` epochs; 0 disables validation.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop once validation mean DSC reaches this value.
    #[serde(default)]
    pub target_dice: Option<f64>,
    #[serde(default)]
    pub device: DeviceHint,
    /// Threads used for loading and augmenting samples.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl TrainConfig {
    /// 100 epochs, Adam at a constant 0.1, batches of 16.
    pub fn reference() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            eval_every: 1,
            target_dice: None,
            device: DeviceHint::Cpu,
            workers: 1,
        }
    }

    /// Settings for the 64x64 synthetic task: smaller batches and learning
    /// rate, validation every five epochs, early stop at 0.9 mean DSC.
    pub fn toy() -> Self {
        Self {
            epochs: 200,
            lr: 2e-3,
            batch_size: 4,
            eval_every: 5,
            target_dice: Some(0.9),
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs: must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr: {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers: must be at least 1"));
        }
        let a = &self.augment;
        for (name, p) in [("p_rotate", a.p_rotate), ("p_hflip", a.p_hflip), ("p_vflip", a.p_vflip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{name}: {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serialising train config: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice_loss: f64,
    pub val_dsc: Option<f64>,
    pub val_hd95: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: Option<(usize, f64)>,
    pub state: TrainingState,
}

impl TrainOutcome {
    /// Last recorded validation DSC.
    pub fn final_dsc(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.val_dsc)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `last.safetensors` and `best.safetensors`.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpointed state.
    pub resume: Option<TrainingState>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
}

const SHUFFLE_STREAM: u64 = u32::MAX as u64 - 1;

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("workers: {e}")))
}

fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Train `model` in place on `train_idx`, validating on `val_idx` (the
/// training indices when `None`).
pub fn train(
    model: &Model,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: Option<&[usize]>,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    check_classes(model, dataset)?;
    let pool = worker_pool(cfg.workers)?;
    let val_idx = val_idx.unwrap_or(train_idx);

    let (start, mut opt) = match opts.resume {
        Some(state) => {
            if state.seed != cfg.seed {
                log::warn!("resuming with seed {} over checkpoint seed {}", cfg.seed, state.seed);
            }
            (
                state.epoch as usize,
                state.optimizer.unwrap_or_else(|| Adam::new(cfg.adam)),
            )
        }
        None => (0, Adam::new(cfg.adam)),
    };
    let train_toml = cfg.to_toml()?;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;

    for epoch in start..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = train_idx.to_vec();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64, SHUFFLE_STREAM));

        let (mut sum, mut sum_ce, mut sum_dice) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<(Array3<f32>, Array2<u8>)> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let s = &dataset.samples[i];
                        let rec = draw_augment(&cfg.augment, &mut sample_rng(cfg.seed, epoch as u64, i as u64));
                        apply_augment(&s.image, &s.mask, &rec)
                    })
                    .collect()
            });
            let (x, target) = make_batch(&items, dataset.num_classes)?;
            let logits = model.forward(&x, Mode::Train)?;
            let terms = compute_loss(&logits, &target, cfg.loss)?;
            let loss = scalar(&terms.total)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b}, lr {lr}"
                )));
            }
            let grads = terms.total.backward()?;
            opt.step(model.params(), &grads, lr)?;
            let n = chunk.len() as f64;
            sum += loss * n;
            sum_ce += scalar(&terms.ce)? * n;
            sum_dice += scalar(&terms.dice)? * n;
        }
        let n = order.len() as f64;
        let mut record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: sum / n,
            ce: sum_ce / n,
            dice_loss: sum_dice / n,
            val_dsc: None,
            val_hd95: None,
        };

        let state = TrainingState {
            epoch: epoch as u64 + 1,
            seed: cfg.seed,
            optimizer: Some(opt.clone()),
            train_config: Some(train_toml.clone()),
        };
        let last_epoch = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last_epoch);
        let mut stop = false;
        if due {
            let (report, _) = evaluate(model, dataset, val_idx, cfg.batch_size)?;
            record.val_dsc = Some(report.mean_dsc);
            record.val_hd95 = Some(report.mean_hd95);
            if best.is_none_or(|(_, d)| report.mean_dsc > d) {
                best = Some((epoch + 1, report.mean_dsc));
                if let Some(dir) = &opts.out_dir {
                    checkpoint::save(&dir.join("best.safetensors"), model, &state)?;
                }
            }
            stop = cfg.target_dice.is_some_and(|t| report.mean_dsc >= t);
        }
        if let Some(dir) = &opts.out_dir {
            checkpoint::save(&dir.join("last.safetensors"), model, &state)?;
        }
        log::info!(
            "epoch {} lr {:.2e} loss {:.5} (ce {:.5}, dice {:.5}){}",
            record.epoch,
            lr,
            record.loss,
            record.ce,
            record.dice_loss,
            record.val_dsc.map(|d| format!(" val dsc {d:.4}")).unwrap_or_default()
        );
        if let Some(cb) = opts.on_epoch {
            cb(&record);
        }
        history.push(record);
        if stop {
            break;
        }
    }

    let epoch = history.last().map_or(start, |r| r.epoch) as u64;
    Ok(TrainOutcome {
        history,
        best,
        state: TrainingState {
            epoch,
            seed: cfg.seed,
            optimizer: Some(opt),
            train_config: Some(train_toml),
        },
    })
}

fn check_classes(model: &Model, dataset: &Dataset) -> Result<()> {
    let c = model.config();
    if c.num_classes != dataset.num_classes {
        return Err(Error::data(format!(
            "model has {} classes, dataset {}",
            c.num_classes, dataset.num_classes
        )));
    }
    if c.in_channels != dataset.in_channels {
        return Err(Error::data(format!(
            "model expects {} channels, dataset has {}",
            c.in_channels, dataset.in_channels
        )));
    }
    Ok(())
}

/// Predicted class maps for `indices`, in order.
pub fn predict_indices(model: &Model, dataset: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<Array2<u8>>> {
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let items: Vec<(Array3<f32>, Array2<u8>)> = chunk
            .iter()
            .map(|&i| (dataset.samples[i].image.clone(), dataset.samples[i].mask.clone()))
            .collect();
        let (x, _) = make_batch(&items, dataset.num_classes)?;
        let logits = model.forward(&x, Mode::Eval)?.detach();
        preds.extend(predict_classes(&logits)?);
    }
    Ok(preds)
}

/// Deterministic inference and metrics over `indices`.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    batch: usize,
) -> Result<(MetricsReport, Vec<Array2<u8>>)> {
    if indices.is_empty() {
        return Err(Error::data("evaluation split is empty"));
    }
    check_classes(model, dataset)?;
    let preds = predict_indices(model, dataset, indices, batch)?;
    let gts: Vec<Array2<u8>> = indices.iter().map(|&i| dataset.samples[i].mask.clone()).collect();
    let report = evaluate_masks(&preds, &gts, dataset.num_classes, Spacing::default())?;
    Ok((report, preds))
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: &'static str,
    pub flags: AblationFlags,
    pub param_count: usize,
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Four-row table: method, the three component marks, parameter count,
    /// DSC, HD95 and F1.
    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let mut s = String::from("| Method | Pyr | PVT | ViT | Params | DSC | HD95 | F1 |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let (d, h, f) = match &r.report {
                Some(m) => (
                    format!("{:.2}", 100.0 * m.mean_dsc),
                    format!("{:.2}", m.mean_hd95),
                    format!("{:.2}", 100.0 * m.mean_f1),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {d} | {h} | {f} |",
                r.label,
                mark(r.flags.pyr),
                mark(r.flags.pvt),
                mark(r.flags.vit),
                r.param_count
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,pyr,pvt,vit,params,dsc,hd95,f1\n");
        for r in &self.rows {
            let (d, h, f) = r
                .report
                .as_ref()
                .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.mean_dsc, m.mean_hd95, m.mean_f1));
            let _ = writeln!(
                s,
                "\"{}\",{},{},{},{},{d:.6},{h:.6},{f:.6}",
                r.label, r.flags.pyr, r.flags.pvt, r.flags.vit, r.param_count
            );
        }
        s
    }
}

/// Parameter counts of the four ablation rows without training.
pub fn ablation_param_counts(base: &ModelConfig) -> Result<Vec<AblationRow>> {
    AblationFlags::table_rows()
        .into_iter()
        .map(|(label, flags)| {
            let cfg = ModelConfig { flags, ..base.clone() };
            Ok(AblationRow {
                label,
                flags,
                param_count: build_model(&cfg)?.param_count(),
                report: None,
            })
        })
        .collect()
}

/// Train and evaluate every ablation row under identical seeds.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = ablation_param_counts(base)?;
    for row in &mut rows {
        let model = build_model(&ModelConfig { flags: row.flags, ..base.clone() })?;
        log::info!("ablation row {}: {} parameters", row.label, row.param_count);
        let dir = out_dir.map(|d| d.join(slug(row.label)));
        train(
            &model,
            dataset,
            train_idx,
            Some(test_idx),
            train_cfg,
            TrainOptions {
                out_dir: dir,
                ..Default::default()
            },
        )?;
        row.report = Some(evaluate(&model, dataset, test_idx, train_cfg.batch_size)?.0);
    }
    Ok(AblationTable { rows })
}

fn slug(label: &str) -> String {
    label
        .chars()
        .filter_map(|c| match c {
            'a'..='z' | '0'..='9' => Some(c),
            'A'..='Z' => Some(c.to_ascii_lowercase()),
            ' ' | '-' => Some('_'),
            _ => None,
        })
        .collect()
}

/// How a prediction input was brought to the network resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictGeometry {
    pub original: (usize, usize),
    pub padded: (usize, usize),
    pub resized: bool,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Segment one image of any size: zero-pad bottom/right to a multiple of
/// 32, resize to the network input if that still differs, predict, and undo
/// both steps.
pub fn predict_image(model: &Model, image: &Array3<f32>) -> Result<(Array2<u8>, PredictGeometry)> {
    let cfg = model.config();
    let (c, h, w) = image.dim();
    if c != cfg.in_channels {
        return Err(Error::data(format!("image has {c} channels, model expects {}", cfg.in_channels)));
    }
    let padded = (round_up(h, 32), round_up(w, 32));
    if padded != (h, w) {
        log::info!("padding {h}x{w} input to {}x{}", padded.0, padded.1);
    }
    let mut x = Array3::<f32>::zeros((c, padded.0, padded.1));
    x.slice_mut(ndarray::s![.., ..h, ..w]).assign(image);
    let resized = padded != cfg.input_size;
    if resized {
        log::info!("resizing {}x{} to the network input {:?}", padded.0, padded.1, cfg.input_size);
        x = resize_image(&x, cfg.input_size.0, cfg.input_size.1);
    }
    let (batch, _) = make_batch(&[(x, Array2::zeros(cfg.input_size))], cfg.num_classes)?;
    let logits = model.forward(&batch, Mode::Eval)?.detach();
    let mut mask = predict_classes(&logits)?.remove(0);
    if resized {
        mask = resize_mask(&mask, padded.0, padded.1);
    }
    let mask = mask.slice(ndarray::s![..h, ..w]).to_owned();
    Ok((
        mask,
        PredictGeometry {
            original: (h, w),
            padded,
            resized,
        },
    ))
}

/// Distinct colour per class; background stays transparent in overlays.
pub fn class_colour(k: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    PALETTE[(k as usize + PALETTE.len() - 1) % PALETTE.len()]
}

/// RGB overlay of `mask` over `image` with 50% opacity.
pub fn overlay(image: &Array3<f32>, mask: &Array2<u8>) -> image::RgbImage {
    let (c, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let base: [f32; 3] = if c >= 3 {
            [image[(0, y, x)], image[(1, y, x)], image[(2, y, x)]]
        } else {
            [image[(0, y, x)]; 3]
        };
        let k = mask[(y, x)];
        let px = |i: usize| {
            let v = base[i].clamp(0.0, 1.0) * 255.0;
            if k == 0 {
                v.round() as u8
            } else {
                (0.5 * v + 0.5 * class_colour(k)[i] as f32).round() as u8
            }
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny(num_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::toy(num_classes);
        cfg.input_size = (32, 32);
        cfg.in_channels = 1;
        cfg.base_width = 4;
        cfg.pvt.channels = [4, 8, 8, 16];
        cfg.pvt.heads = [1, 1, 2, 2];
        cfg.vit.heads = 2;
        cfg
    }

    fn dataset(n: usize) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            count: n,
            size: (32, 32),
            num_classes: 3,
            ..Default::default()
        };
        generate_synthetic(dir.path(), &spec).unwrap();
        let ds = Dataset::load(dir.path(), 1, 3, (32, 32)).unwrap();
        (dir, ds)
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::reference();
        assert_eq!((c.epochs, c.lr, c.batch_size), (100, 0.1, 16));
        c.validate().unwrap();
        c.epochs = 0;
        assert!(c.validate().unwrap_err().to_string().contains("epochs"));
        let mut c = TrainConfig::reference();
        c.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let text = TrainConfig::toy().to_toml().unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), TrainConfig::toy());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig {
            schedule: LrSchedule::Cosine,
            epochs: 10,
            lr: 1.0,
            ..TrainConfig::reference()
        };
        assert_eq!(c.lr_at(0), 1.0);
        assert!((c.lr_at(5) - 0.5).abs() < 1e-12);
        assert_eq!(TrainConfig::reference().lr_at(57), 0.1);
    }

    #[test]
    fn short_runs_are_reproducible_and_checkpointed() {
        let (_d, ds) = dataset(4);
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch_size: 2,
            eval_every: 1,
            ..TrainConfig::reference()
        };
        let idx: Vec<usize> = (0..4).collect();
        let run = |dir: Option<PathBuf>| {
            let model = build_model(&tiny(3)).unwrap();
            train(&model, &ds, &idx, None, &cfg, TrainOptions { out_dir: dir, ..Default::default() }).unwrap()
        };
        let a = run(Some(out.path().to_path_buf()));
        let b = run(None);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        assert!(out.path().join("last.safetensors").is_file());
        let (_, st) = checkpoint::load(&out.path().join("best.safetensors")).unwrap();
        let best = a.best.unwrap();
        assert_eq!(st.epoch as usize, best.0);
        assert!(a.history.iter().all(|r| r.val_dsc.unwrap() <= best.1));
    }

    #[test]
    fn evaluate_errors_and_repeatability() {
        let (_d, ds) = dataset(2);
        let model = build_model(&tiny(3)).unwrap();
        assert!(evaluate(&model, &ds, &[], 2).is_err());
        let (a, _) = evaluate(&model, &ds, &[0, 1], 2).unwrap();
        let (b, _) = evaluate(&model, &ds, &[0, 1], 1).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let other = build_model(&tiny(2)).unwrap();
        assert!(matches!(evaluate(&other, &ds, &[0], 1), Err(Error::Data(_))));
    }

    #[test]
    fn padding_arithmetic() {
        let model = build_model(&tiny(3)).unwrap();
        let img = Array3::<f32>::zeros((1, 31, 31));
        let (mask, geo) = predict_image(&model, &img).unwrap();
        assert_eq!(mask.dim(), (31, 31));
        assert_eq!(geo.padded, (32, 32));
        assert!(!geo.resized);
        assert!(mask.iter().all(|&v| v < 3));
        let img = Array3::<f32>::zeros((1, 63, 63));
        let (mask, geo) = predict_image(&model, &img).unwrap();
        assert_eq!((mask.dim(), geo.padded, geo.resized), ((63, 63), (64, 64), true));
    }

    #[test]
    fn ablation_table_layout() {
        let rows = ablation_param_counts(&tiny(3)).unwrap();
        let table = AblationTable { rows };
        let text = table.to_text();
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("| (1) No Pyramid Path | ✗ | ✓ | ✓ |"));
        assert_eq!(slug("(1) No Pyramid Path"), "1_no_pyramid_path");
    }

    #[test]
    fn overlay_keeps_background() {
        let img = Array3::<f32>::from_elem((1, 2, 2), 1.0);
        let mask = ndarray::array![[0u8, 1], [0, 0]];
        let o = overlay(&img, &mask);
        assert_eq!(o.get_pixel(0, 0).0, [255, 255, 255]);
        assert_ne!(o.get_pixel(1, 0).0, [255, 255, 255]);
    }
}
