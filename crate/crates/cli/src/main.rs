//! `pagty`: train, evaluate, ablate and run the segmentation network from
//! the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error, 4 numeric failure (non-finite loss).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pag_transynet::checkpoint;
use pag_transynet::config::ModelConfig;
use pag_transynet::data::{generate_synthetic, make_folds, read_image, write_mask, Dataset, Fold, SyntheticSpec};
use pag_transynet::metrics::{aggregate, AggregationScheme, MetricsReport};
use pag_transynet::train::{evaluate, overlay, predict_image, run_ablation, train, DeviceHint, TrainConfig, TrainOptions};
use pag_transynet::verify;
use pag_transynet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pagty", version, about = "Hybrid CNN-transformer medical image segmentation")]
struct Cli {
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the training seed and the initialisation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Threads for loading and augmentation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, env = "PAGTY_DEVICE")]
    device: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset directory; writes checkpoints and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes metrics.csv and metrics.txt.
    Eval(EvalArgs),
    /// Segment one image; writes a class-id mask and a colour overlay.
    Predict(PredictArgs),
    /// Train and evaluate the four ablation rows.
    Ablate(TrainArgs),
    /// Write a synthetic shapes dataset to --out-dir.
    GenSynthetic(SynthArgs),
    /// Run the invariant suite.
    Verify,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Hold out fold `fold` of `folds` grouped folds for validation.
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Resume from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scheme {
    MeanPerImage,
    FiveFold,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, value_enum, default_value = "mean-per-image")]
    scheme: Scheme,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    per_group: usize,
    #[arg(long)]
    overwrite: bool,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(3),
            train: TrainConfig::toy(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.model.init_seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.train.workers = w;
    }
    if let Some(d) = &cli.device {
        cfg.train.device = d.parse::<DeviceHint>()?;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    fs::write(path, text).map_err(io_error(path))
}

fn split(ds: &Dataset, args: &SplitArgs, seed: u64) -> Result<Option<Fold>> {
    match args.fold {
        None => Ok(None),
        Some(i) => {
            if i >= args.folds {
                return Err(Error::Config(format!("fold: {i} out of range for {} folds", args.folds)));
            }
            Ok(Some(make_folds(&ds.groups(), args.folds, seed)?.swap_remove(i)))
        }
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let ds = Dataset::load(&args.data, cfg.model.in_channels, cfg.model.num_classes, cfg.model.input_size)?;
    let fold = split(&ds, &args.split, cfg.train.seed)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let (train_idx, val_idx) = match &fold {
        Some(f) => (f.train.clone(), Some(f.test.clone())),
        None => (all, None),
    };

    let (model, resume) = match &args.resume {
        Some(path) => {
            let (model, state) = checkpoint::load(path)?;
            (model, Some(state))
        }
        None => {
            if cfg.model.input_stats.is_none() {
                cfg.model.input_stats = Some(ds.channel_stats(&train_idx)?);
            }
            (pag_transynet::model::build_model(&cfg.model)?, None)
        }
    };
    let run = RunConfig {
        model: model.config().clone(),
        train: cfg.train.clone(),
    };
    write(&cli.out_dir.join("config.toml"), &toml::to_string(&run).map_err(|e| Error::Config(e.to_string()))?)?;
    log::info!("training {} parameters on {} images", model.param_count(), train_idx.len());

    let out = train(
        &model,
        &ds,
        &train_idx,
        val_idx.as_deref(),
        &cfg.train,
        TrainOptions {
            out_dir: Some(cli.out_dir.clone()),
            resume,
            on_epoch: None,
        },
    )?;
    let mut csv = String::from("epoch,lr,loss,ce,dice_loss,val_dsc,val_hd95\n");
    for r in &out.history {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{:e},{:.6},{:.6},{:.6},{},{}\n",
            r.epoch,
            r.lr,
            r.loss,
            r.ce,
            r.dice_loss,
            opt(r.val_dsc),
            opt(r.val_hd95)
        ));
    }
    write(&cli.out_dir.join("history.csv"), &csv)?;
    match out.best {
        Some((epoch, dsc)) => println!("best mean DSC {dsc:.4} at epoch {epoch}"),
        None => println!("trained {} epochs (no validation)", out.history.len()),
    }
    Ok(())
}

fn emit_report(out_dir: &Path, report: &MetricsReport) -> Result<()> {
    write(&out_dir.join("metrics.csv"), &report.to_csv())?;
    write(&out_dir.join("metrics.txt"), &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (model, state) = checkpoint::load(&args.checkpoint)?;
    let mc = model.config();
    let ds = Dataset::load(&args.data, mc.in_channels, mc.num_classes, mc.input_size)?;
    // same folds as the training run unless overridden
    let seed = cli.seed.unwrap_or(state.seed);
    let report = match args.scheme {
        Scheme::MeanPerImage => {
            let idx: Vec<usize> = match split(&ds, &args.split, seed)? {
                Some(f) => f.test,
                None => (0..ds.len()).collect(),
            };
            let (r, _) = evaluate(&model, &ds, &idx, 8)?;
            aggregate(&[r], AggregationScheme::MeanPerImage)?
        }
        Scheme::FiveFold => {
            let folds = make_folds(&ds.groups(), 5, seed)?;
            let reports = folds
                .iter()
                .map(|f| Ok(evaluate(&model, &ds, &f.test, 8)?.0))
                .collect::<Result<Vec<_>>>()?;
            aggregate(&reports, AggregationScheme::FiveFold)?
        }
    };
    emit_report(&cli.out_dir, &report)
}

fn cmd_predict(cli: &Cli, args: &PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let image = read_image(&args.image, model.config().in_channels)?;
    let (mask, geo) = predict_image(&model, &image)?;
    if geo.padded != geo.original {
        log::info!("padded {:?} to {:?} and cropped back", geo.original, geo.padded);
    }
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    fs::create_dir_all(&cli.out_dir).map_err(io_error(&cli.out_dir))?;
    let mask_path = cli.out_dir.join(format!("{stem}_mask.png"));
    let overlay_path = cli.out_dir.join(format!("{stem}_overlay.png"));
    write_mask(&mask_path, &mask)?;
    overlay(&image, &mask)
        .save(&overlay_path)
        .map_err(|e| Error::Data(format!("{}: {e}", overlay_path.display())))?;
    println!("{}\n{}", mask_path.display(), overlay_path.display());
    Ok(())
}

fn cmd_ablate(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let ds = Dataset::load(&args.data, cfg.model.in_channels, cfg.model.num_classes, cfg.model.input_size)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let (train_idx, test_idx) = match split(&ds, &args.split, cfg.train.seed)? {
        Some(f) => (f.train, f.test),
        None => (all.clone(), all),
    };
    let table = run_ablation(&cfg.model, &cfg.train, &ds, &train_idx, &test_idx, Some(&cli.out_dir))?;
    write(&cli.out_dir.join("ablation.md"), &table.to_text())?;
    write(&cli.out_dir.join("ablation.csv"), &table.to_csv())?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_synthetic(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        count: args.count,
        size: (args.size, args.size),
        num_classes: args.classes,
        channels: args.channels,
        per_group: args.per_group,
        seed: cli.seed.unwrap_or(0),
        overwrite: args.overwrite,
        ..Default::default()
    };
    let refs = generate_synthetic(&cli.out_dir, &spec)?;
    println!("wrote {} samples to {}", refs.len(), cli.out_dir.display());
    Ok(())
}

fn cmd_verify(cli: &Cli) -> Result<bool> {
    let checks = verify::run_all(cli.seed.unwrap_or(0));
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a).map(|_| true),
        Command::Eval(a) => cmd_eval(cli, a).map(|_| true),
        Command::Predict(a) => cmd_predict(cli, a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(cli, a).map(|_| true),
        Command::GenSynthetic(a) => cmd_synthetic(cli, a).map(|_| true),
        Command::Verify => cmd_verify(cli),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
