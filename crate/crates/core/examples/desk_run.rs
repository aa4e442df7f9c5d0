//! Train the desk-scale model on a freshly generated synthetic set and
//! print the per-epoch history.
//!
//! ```text
//! cargo run --release -p pag-transynet --example desk_run -- [epochs] [lr] [batch]
//! ```

use std::time::Instant;

use pag_transynet::config::ModelConfig;
use pag_transynet::data::{generate_synthetic, Dataset, SyntheticSpec};
use pag_transynet::model::build_model;
use pag_transynet::train::{train, EpochRecord, TrainConfig, TrainOptions};

fn main() -> pag_transynet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize| args.get(i).and_then(|s| s.parse::<f64>().ok());
    let mut cfg = TrainConfig::toy();
    if let Some(e) = arg(0) {
        cfg.epochs = e as usize;
    }
    if let Some(lr) = arg(1) {
        cfg.lr = lr;
    }
    if let Some(b) = arg(2) {
        cfg.batch_size = b as usize;
    }

    let dir = std::env::temp_dir().join("pagty-desk-run");
    let spec = SyntheticSpec {
        count: 20,
        num_classes: 3,
        seed: 7,
        overwrite: true,
        ..Default::default()
    };
    generate_synthetic(&dir, &spec)?;
    let model_cfg = ModelConfig::toy(3);
    let ds = Dataset::load(&dir, model_cfg.in_channels, 3, model_cfg.input_size)?;
    let model = build_model(&model_cfg)?;
    println!("parameters: {}", model.param_count());

    let start = Instant::now();
    let report = |r: &EpochRecord| {
        println!(
            "epoch {:3} loss {:.4} ce {:.4} dice {:.4} val {:?} [{:.1}s]",
            r.epoch,
            r.loss,
            r.ce,
            r.dice_loss,
            r.val_dsc,
            start.elapsed().as_secs_f64()
        )
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    let out = train(&model, &ds, &idx, None, &cfg, TrainOptions { on_epoch: Some(&report), ..Default::default() })?;
    println!("best {:?} after {:.1}s", out.best, start.elapsed().as_secs_f64());
    Ok(())
}
