//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any fails.
//!
//! ```text
//! cargo test -p pag-transynet --test acceptance
//! ```

use std::io::Write;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pag_transynet::attention_gates::{AttentionGate, AttentionGateSpec, DagWiring};
use pag_transynet::checkpoint::{self, TrainingState};
use pag_transynet::config::{AblationFlags, ModelConfig, SkipMode};
use pag_transynet::data::{draw_augment, generate_synthetic, sample_rng, AugmentConfig, Dataset, SyntheticSpec};
use pag_transynet::encoder::PvtSpec;
use pag_transynet::metrics::{dice, evaluate_masks, f1_micro, hd95, iou, MaskBatch, Spacing};
use pag_transynet::model::{build_model, compute_loss, LossWeights};
use pag_transynet::nn::{Mode, Normalization};
use pag_transynet::params::ParamStore;
use pag_transynet::train::{ablation_param_counts, evaluate, run_ablation, train, AblationTable, TrainConfig, TrainOptions};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tiny(num_classes: usize, flags: AblationFlags) -> ModelConfig {
    let mut cfg = ModelConfig::toy(num_classes);
    cfg.input_size = (32, 32);
    cfg.base_width = 4;
    cfg.pvt.channels = [4, 8, 8, 16];
    cfg.pvt.heads = [1, 1, 2, 2];
    cfg.vit.heads = 2;
    cfg.flags = flags;
    cfg
}

fn random_flags(rng: &mut ChaCha8Rng) -> AblationFlags {
    loop {
        let f = AblationFlags {
            pyr: rng.random_bool(0.7),
            pvt: rng.random_bool(0.7),
            vit: rng.random_bool(0.7),
        };
        if f.pyr || f.pvt {
            return f;
        }
    }
}

// ---------------------------------------------------------------- shapes

fn shape_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sizes = [64, 96, 128, 224];
    let mut seen_sizes = [false; 4];
    let n = 50;
    for i in 0..n {
        let b = [4, 8, 16][rng.random_range(0..3)];
        let si = rng.random_range(0..4);
        seen_sizes[si] = true;
        let size = sizes[si];
        let classes = [2, 3, 9][rng.random_range(0..3)];
        let mut cfg = ModelConfig::toy(classes);
        cfg.input_size = (size, size);
        cfg.base_width = b;
        cfg.in_channels = [1, 3][rng.random_range(0..2)];
        cfg.pvt = PvtSpec {
            channels: [b, 2 * b, 4 * b, 4 * b],
            depths: [1; 4],
            heads: [1, 2, 4, 4],
            mlp_ratios: [2.0; 4],
            sr_ratios: [8, 4, 2, 1],
        };
        cfg.vit.heads = 4;
        cfg.flags = random_flags(&mut rng);
        cfg.skip_mode = if rng.random_bool(0.5) { SkipMode::DualFeature } else { SkipMode::TwoLevels };
        cfg.dag_wiring = if rng.random_bool(0.5) { DagWiring::Mixed } else { DagWiring::MainGated };
        cfg.normalization = [Normalization::Batch, Normalization::Group, Normalization::None][rng.random_range(0..3)];
        cfg.init_seed = i;
        let batch = rng.random_range(1..=2);
        let model = build_model(&cfg).map_err(e2s)?;
        let x = Tensor::randn(0f32, 1., (batch, cfg.in_channels, size, size), &Device::Cpu).map_err(e2s)?;
        let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Eval };
        let y = model.forward(&x, mode).map_err(e2s)?;
        ensure(
            y.dims() == [batch, classes, size, size],
            format!("config {i} ({cfg:?}) gave {:?}", y.dims()),
        )?;
    }
    let t = start.elapsed();
    ensure(seen_sizes.iter().all(|&s| s), "not every input size was drawn")?;
    ensure(t < Duration::from_secs(120), format!("took {:.1}s", t.as_secs_f64()))?;
    Ok(format!("{n} random configs, output [B,K,H,W] in {:.1}s", t.as_secs_f64()))
}

// ---------------------------------------------------------------- tokens

fn vit_tokens() -> Outcome {
    let cfg = ModelConfig::reference(9);
    let model = build_model(&cfg).map_err(e2s)?;
    let x = Tensor::randn(0f32, 1., (1, 3, 224, 224), &Device::Cpu).map_err(e2s)?;
    let (logits, enc) = model.forward_detailed(&x, Mode::Eval).map_err(e2s)?;
    let tokens = enc.tokens_out.ok_or("bottleneck transformer did not run")?;
    ensure(enc.token_count == Some(196), format!("token count {:?}", enc.token_count))?;
    ensure(tokens.dims() == [1, 768, 14, 14], format!("token map {:?}", tokens.dims()))?;
    ensure(logits.dims() == [1, 9, 224, 224], format!("logits {:?}", logits.dims()))?;
    Ok(format!(
        "224x224 input: 14x14 grid, 196 tokens of width 768 ({} parameters)",
        model.param_count()
    ))
}

// ---------------------------------------------------------------- gates

fn gate_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for i in 0..100 {
        let gc = rng.random_range(1..24);
        let fc = rng.random_range(1..24);
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let store = ParamStore::new(i);
        let ag = AttentionGate::new(AttentionGateSpec::new(gc, fc), store.root()).map_err(e2s)?;
        let scale = [1.0, 10.0, 1000.0][i as usize % 3];
        let g = (Tensor::randn(0f32, 1., (2, gc, h, w), &Device::Cpu).map_err(e2s)? * scale).map_err(e2s)?;
        let x = (Tensor::randn(0f32, 1., (2, fc, h, w), &Device::Cpu).map_err(e2s)? * scale).map_err(e2s)?;
        let (_, a) = ag.forward_with_coefficients(&g, &x).map_err(e2s)?;
        let v: Vec<f32> = a.flatten_all().and_then(|t| t.to_vec1()).map_err(e2s)?;
        for &a in &v {
            ensure(a > 0.0 && a < 1.0, format!("input {i}: coefficient {a} outside (0,1)"))?;
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    // zero psi: alpha = sigmoid(0) = 0.5 everywhere
    let store = ParamStore::new(5);
    let ag = AttentionGate::new(AttentionGateSpec::new(16, 12), store.root()).map_err(e2s)?;
    let inter = ag.spec().inter_channels;
    store
        .assign("psi.weight", &Tensor::zeros((1, inter, 1, 1), DType::F32, &Device::Cpu).map_err(e2s)?)
        .map_err(e2s)?;
    store.assign("psi.bias", &Tensor::zeros(1, DType::F32, &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
    let g = Tensor::randn(0f32, 3., (2, 16, 9, 7), &Device::Cpu).map_err(e2s)?;
    let x = Tensor::randn(0f32, 3., (2, 12, 9, 7), &Device::Cpu).map_err(e2s)?;
    let out = ag.forward(&g, &x).map_err(e2s)?;
    let err = (out - (&x * 0.5).map_err(e2s)?)
        .and_then(|d| d.abs())
        .and_then(|d| d.max_all())
        .and_then(|d| d.to_scalar::<f32>())
        .map_err(e2s)?;
    ensure(err <= 1e-6, format!("zero-psi output differs from 0.5x by {err}"))?;
    Ok(format!(
        "100 random inputs, coefficients in [{lo:.3e}, {hi}] strictly inside (0,1); zero psi = 0.5x within {err:.1e}"
    ))
}

// ---------------------------------------------------------------- gradients

fn gradient_flow() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    for (label, flags) in AblationFlags::table_rows() {
        let cfg = tiny(3, flags);
        let model = build_model(&cfg).map_err(e2s)?;
        let names = model.param_names();
        for (prefix, live) in [
            ("encoder.pyramid.", flags.pyr),
            ("encoder.pvt.", flags.pvt),
            ("encoder.vit.", flags.vit),
        ] {
            let present = names.iter().any(|n| n.starts_with(prefix));
            ensure(present == live, format!("{label}: {prefix}* present = {present}"))?;
        }
        if !flags.pyr {
            ensure(!names.iter().any(|n| n.contains("ag_pyramid")), format!("{label}: pyramid gate present"))?;
        }
        if !flags.pvt {
            ensure(!names.iter().any(|n| n.contains("ag_main_transformer")), format!("{label}: transformer gate present"))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::randn(0f32, 1., (2, 1, 32, 32), &Device::Cpu).map_err(e2s)?;
        let mask = Array3::from_shape_fn((2, 32, 32), |_| rng.random_range(0..3u8));
        let target = MaskBatch::new(mask, 3).map_err(e2s)?;
        let logits = model.forward(&x, Mode::Train).map_err(e2s)?;
        let loss = compute_loss(&logits, &target, LossWeights::default()).map_err(e2s)?;
        let grads = loss.total.backward().map_err(e2s)?;
        let trainable = model.params().trainable();
        for (name, var) in &trainable {
            let g = grads.get(var.as_tensor()).ok_or(format!("{label}: no gradient for {name}"))?;
            let finite = g
                .flatten_all()
                .and_then(|t| t.to_vec1::<f32>())
                .map_err(e2s)?
                .iter()
                .all(|v| v.is_finite());
            ensure(finite, format!("{label}: non-finite gradient for {name}"))?;
        }
        details.push(format!("{}: {}", &label[..3], trainable.len()));
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), format!("took {:.1}s", t.as_secs_f64()))?;
    Ok(format!("every live tensor has a finite gradient ({}) in {:.1}s", details.join(", "), t.as_secs_f64()))
}

// ---------------------------------------------------------------- metrics

fn bits_to_mask(bits: u16, h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| bits >> (y * w + x) & 1 == 1)
}

/// All-pairs brute-force HD95 with a linear-interpolation percentile.
fn hd95_oracle(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let pts = |m: &Array2<bool>| -> Vec<(i64, i64)> {
        m.indexed_iter().filter(|(_, &v)| v).map(|((y, x), _)| (y as i64, x as i64)).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => {
            let (h, w) = a.dim();
            return ((h * h + w * w) as f64).sqrt();
        }
        _ => {}
    }
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| -> f64 {
        let d2 = set.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap();
        (d2 as f64).sqrt()
    };
    let mut d: Vec<f64> = pa.iter().map(|p| nearest(p, &pb)).chain(pb.iter().map(|p| nearest(p, &pa))).collect();
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (rank - lo as f64)
}

fn metric_oracles() -> Outcome {
    // exhaustive 3x3
    let mut pairs = 0u64;
    for pa in 0u16..512 {
        let a = bits_to_mask(pa, 3, 3);
        let la = Array2::from_shape_fn((3, 3), |p| u8::from(a[p]));
        for pb in 0u16..512 {
            let b = bits_to_mask(pb, 3, 3);
            let tp = (pa & pb).count_ones() as u64;
            let fp = (pa & !pb & 0x1ff).count_ones() as u64;
            let fn_ = (!pa & pb & 0x1ff).count_ones() as u64;
            let want_d = if 2 * tp + fp + fn_ == 0 { 1.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
            let want_j = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
            let d = dice(a.view(), b.view()).map_err(e2s)?;
            let j = iou(a.view(), b.view()).map_err(e2s)?;
            let lb = Array2::from_shape_fn((3, 3), |p| u8::from(b[p]));
            let f = f1_micro(std::slice::from_ref(&la), std::slice::from_ref(&lb), 1).map_err(e2s)?;
            ensure(
                d == want_d && j == want_j && f == want_d,
                format!("pair {pa:09b}/{pb:09b}: dice {d} iou {j} f1 {f}"),
            )?;
            pairs += 1;
        }
    }
    // hd95 against brute force
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (p, q) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
        let a = Array2::from_shape_fn((h, w), |_| rng.random_bool(p));
        let b = Array2::from_shape_fn((h, w), |_| rng.random_bool(q));
        let got = hd95(a.view(), b.view(), Spacing::default()).map_err(e2s)?;
        let want = hd95_oracle(&a, &b);
        ensure(got == want, format!("hd95 pair {i} ({h}x{w}): {got} vs oracle {want}"))?;
    }
    // Jaccard / Dice identity
    let mut worst = 0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let a = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.4));
        let b = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.4));
        let d = dice(a.view(), b.view()).map_err(e2s)?;
        let j = iou(a.view(), b.view()).map_err(e2s)?;
        worst = worst.max((j - d / (2.0 - d)).abs());
    }
    ensure(worst <= 1e-12, format!("j = d/(2-d) violated by {worst}"))?;
    Ok(format!(
        "{pairs} 3x3 pairs exact; 200 hd95 pairs equal to brute force; identity within {worst:.1e} on 1000 pairs"
    ))
}

// ---------------------------------------------------------------- desk scale

fn desk_run(ds: &Dataset, cfg: &TrainConfig) -> Result<(Vec<pag_transynet::train::EpochRecord>, f64), String> {
    let model = build_model(&ModelConfig::toy(3)).map_err(e2s)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let out = train(&model, ds, &idx, None, cfg, TrainOptions::default()).map_err(e2s)?;
    let (report, _) = evaluate(&model, ds, &idx, cfg.batch_size).map_err(e2s)?;
    Ok((out.history, report.mean_dsc))
}

fn desk_scale() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let spec = SyntheticSpec {
        count: 20,
        size: (64, 64),
        num_classes: 3,
        seed: 7,
        ..Default::default()
    };
    generate_synthetic(dir.path(), &spec).map_err(e2s)?;
    let ds = Dataset::load(dir.path(), 1, 3, (64, 64)).map_err(e2s)?;
    let cfg = TrainConfig::toy();
    let start = Instant::now();
    let (history, dsc) = desk_run(&ds, &cfg)?;
    let t = start.elapsed();
    ensure(history.len() <= 200, format!("{} epochs", history.len()))?;
    ensure(dsc >= 0.90, format!("mean foreground Dice {dsc:.4} after {} epochs", history.len()))?;
    ensure(t < Duration::from_secs(600), format!("took {:.1}s", t.as_secs_f64()))?;

    let (again, dsc2) = desk_run(&ds, &cfg)?;
    ensure(history.len() == again.len(), "second run has a different length")?;
    for (a, b) in history.iter().zip(&again) {
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-6;
        let same_val = match (a.val_dsc, b.val_dsc) {
            (Some(x), Some(y)) => close(x, y),
            (None, None) => true,
            _ => false,
        };
        ensure(
            close(a.loss, b.loss) && close(a.ce, b.ce) && close(a.dice_loss, b.dice_loss) && same_val,
            format!("epoch {} differs: {a:?} vs {b:?}", a.epoch),
        )?;
    }
    ensure((dsc - dsc2).abs() <= 1e-6, "final Dice differs between runs")?;
    Ok(format!(
        "mean foreground Dice {dsc:.4} after {} epochs in {:.1}s; repeat run identical",
        history.len(),
        t.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- ablation

fn ablation_accounting() -> Outcome {
    let mut lines = Vec::new();
    for (name, cfg) in [("toy", ModelConfig::toy(3)), ("reference", ModelConfig::reference(9))] {
        let rows = ablation_param_counts(&cfg).map_err(e2s)?;
        let full = rows[3].param_count;
        for r in &rows[..3] {
            ensure(
                r.param_count < full,
                format!("{name}: {} has {} >= {full}", r.label, r.param_count),
            )?;
        }
        lines.push(format!(
            "{name} {}",
            rows.iter().map(|r| r.param_count.to_string()).collect::<Vec<_>>().join("/")
        ));
    }

    // the driver emits the four-row table
    let dir = tempfile::tempdir().map_err(e2s)?;
    let spec = SyntheticSpec {
        count: 4,
        size: (32, 32),
        num_classes: 3,
        ..Default::default()
    };
    generate_synthetic(dir.path(), &spec).map_err(e2s)?;
    let ds = Dataset::load(dir.path(), 1, 3, (32, 32)).map_err(e2s)?;
    let tc = TrainConfig {
        epochs: 1,
        lr: 1e-3,
        batch_size: 2,
        eval_every: 0,
        ..TrainConfig::toy()
    };
    let table: AblationTable =
        run_ablation(&tiny(3, AblationFlags::ALL), &tc, &ds, &[0, 1, 2], &[3], None).map_err(e2s)?;
    let text = table.to_text();
    let body: Vec<&str> = text.lines().skip(2).collect();
    let labels = ["(1) No Pyramid Path", "(2) No PVT", "(3) No ViT", "(4) PAG-TransYnet"];
    ensure(body.len() == 4, format!("table has {} rows", body.len()))?;
    for (line, label) in body.iter().zip(labels) {
        ensure(line.starts_with(&format!("| {label} |")), format!("row `{line}` lacks label {label}"))?;
    }
    ensure(table.rows.iter().all(|r| r.report.is_some()), "a row was not evaluated")?;
    Ok(format!("counts strictly below all-on ({}); four labelled rows emitted", lines.join("; ")))
}

// ---------------------------------------------------------------- augmentation

fn augmentation_rates() -> Outcome {
    let cfg = AugmentConfig::default();
    let n = 10_000u64;
    let (mut rot, mut hf, mut vf) = (0u64, 0u64, 0u64);
    for i in 0..n {
        let rec = draw_augment(&cfg, &mut sample_rng(20240, 0, i));
        if let Some(a) = rec.angle {
            ensure(a.abs() <= 35.0, format!("angle {a}"))?;
            rot += 1;
        }
        hf += u64::from(rec.hflip);
        vf += u64::from(rec.vflip);
    }
    let mut parts = Vec::new();
    for (name, count, p) in [("rotate", rot, 0.1), ("hflip", hf, 0.2), ("vflip", vf, 0.2)] {
        let rate = count as f64 / n as f64;
        let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        ensure((rate - p).abs() <= band, format!("{name} rate {rate} outside {p} ± {band:.4}"))?;
        parts.push(format!("{name} {rate:.4} (p={p} ± {band:.4})"));
    }
    Ok(format!("{n} draws: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- checkpoint

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let spec = SyntheticSpec {
        count: 4,
        num_classes: 3,
        ..Default::default()
    };
    generate_synthetic(&dir.path().join("data"), &spec).map_err(e2s)?;
    let ds = Dataset::load(&dir.path().join("data"), 1, 3, (64, 64)).map_err(e2s)?;
    let model = build_model(&ModelConfig::toy(3)).map_err(e2s)?;
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 2,
        eval_every: 0,
        ..TrainConfig::toy()
    };
    let out = train(&model, &ds, &[0, 1, 2, 3], None, &tc, TrainOptions::default()).map_err(e2s)?;
    let path = dir.path().join("ckpt.safetensors");
    checkpoint::save(&path, &model, &out.state).map_err(e2s)?;
    let (back, state): (_, TrainingState) = checkpoint::load(&path).map_err(e2s)?;
    let x = Tensor::randn(0f32, 1., (2, 1, 64, 64), &Device::Cpu).map_err(e2s)?;
    let a: Vec<f32> = model.forward(&x, Mode::Eval).and_then(|t| Ok(t.flatten_all()?.to_vec1()?)).map_err(e2s)?;
    let b: Vec<f32> = back.forward(&x, Mode::Eval).and_then(|t| Ok(t.flatten_all()?.to_vec1()?)).map_err(e2s)?;
    ensure(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()), "forward outputs differ")?;
    ensure(state.epoch == 1, format!("restored epoch {}", state.epoch))?;
    let bytes = std::fs::read(&path).map_err(e2s)?;
    ensure(checkpoint::to_bytes(&back, &state).map_err(e2s)? == bytes, "re-serialised bytes differ")?;
    let preds = pag_transynet::train::predict_indices(&back, &ds, &[0, 1], 2).map_err(e2s)?;
    let gts: Vec<Array2<u8>> = ds.samples[..2].iter().map(|s| s.mask.clone()).collect();
    evaluate_masks(&preds, &gts, 3, Spacing::default()).map_err(e2s)?;
    Ok(format!("{} logits bit-identical after save/load ({} bytes)", a.len(), bytes.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("shape suite", shape_suite),
        ("bottleneck token count", vit_tokens),
        ("attention-gate bounds", gate_bounds),
        ("gradient flow", gradient_flow),
        ("metric oracle equivalence", metric_oracles),
        ("desk-scale end-to-end", desk_scale),
        ("ablation accounting", ablation_accounting),
        ("augmentation statistics", augmentation_rates),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (name, run) in criteria {
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("acceptance PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                format!("acceptance FAIL {name} ({secs:.1}s): {why}")
            }
        };
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
    let _ = writeln!(out, "acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
