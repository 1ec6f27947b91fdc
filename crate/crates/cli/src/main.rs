//! `msfcn`: generate synthetic video data, train, evaluate, predict and
//! inspect checkpoints.
//!
//! Exit codes: 0 success, 2 usage, config or data errors, 3 numerical
//! failure during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use msfcn::checkpoint;
use msfcn::config::ExperimentConfig;
use msfcn::data::pnm::{read_image, write_image, write_mask};
use msfcn::data::{make_dataset, resize_bilinear, resize_nearest, Dataset, Split};
use msfcn::metrics::MetricsReport;
use msfcn::model::Model;
use msfcn::train::{evaluate, resume, train, TrainReport};
use msfcn::{LabelMask, Shape4, Tensor};
use serde_json::json;

/// Overlay colors, indexed by class modulo 8. Background is black.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

#[derive(Parser)]
#[command(name = "msfcn", version, about = "Multi-stream FCN video segmentation kit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset described by a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's data.root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured model; writes checkpoints and report.json to
    /// the config's output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from output_dir/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the metrics JSON; defaults to
        /// eval_<split>.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment the last of K frames given oldest first.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        /// Label mask output (PGM, gray level = class index).
        #[arg(long, default_value = "mask.pgm")]
        out: PathBuf,
        /// Optional color overlay of the last frame (PPM).
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// List the parameters stored in a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate { config, out } => generate(&config, out.as_deref()),
        Command::Train { config, resume } => train_cmd(&config, resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval_cmd(&checkpoint, &data, &split, out.as_deref()),
        Command::Predict {
            checkpoint,
            frames,
            out,
            overlay,
        } => predict(&checkpoint, &frames, &out, overlay.as_deref()),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<msfcn::Error>(), Some(msfcn::Error::Training { .. })));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MSFCN_THREADS") else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("MSFCN_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn generate(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let root = out.unwrap_or(&cfg.data.root);
    let ds = make_dataset(&cfg.data.scene, cfg.data.seed, cfg.data.sequences)?;
    ds.save(root).with_context(|| format!("cannot write dataset to {}", root.display()))?;
    let s = &ds.manifest.splits;
    println!(
        "wrote {} sequences to {} (train {}, val {}, test {})",
        ds.sequences.len(),
        root.display(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn load_dataset(root: &Path) -> Result<Dataset> {
    Dataset::load(root).with_context(|| format!("cannot load dataset from {}", root.display()))
}

fn train_cmd(config: &Path, resume_run: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg.data.root)?;
    if ds.manifest.config != cfg.data.scene {
        bail!(
            "dataset at {} was generated with a different scene config; regenerate it",
            cfg.data.root.display()
        );
    }
    let order = cfg.model.order;
    let tr = ds.windows(Split::Train, order)?;
    let va = ds.windows(Split::Val, order)?;
    let te = ds.windows(Split::Test, order)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let mut log = |e: &msfcn::train::EpochRecord| {
        eprintln!(
            "epoch {:>2}  steps {:>5}  loss {:.4}  val mIoU {:.4}{}",
            e.epoch,
            e.steps,
            e.train_loss,
            e.val_mean_iou,
            if e.improved { "  *" } else { "" }
        );
    };
    let (model, report): (Model, TrainReport) = if resume_run {
        resume(out, &tr, &va, &cfg.train, &mut log)?
    } else {
        let mut model = Model::build(cfg.model, cfg.train.seed)?;
        let report = train(&mut model, &tr, &va, &cfg.train, Some(out), &mut log)?;
        (model, report)
    };
    let test: Option<MetricsReport> = if te.is_empty() {
        None
    } else {
        Some(evaluate(&model, &te)?.report()?)
    };
    let path = out.join("report.json");
    write_json(
        &path,
        &json!({
            "config": cfg,
            "training": report,
            "test_metrics": test,
        }),
    )?;
    println!(
        "{}: stopped after epoch {} ({}), best epoch {} val mIoU {:.4}, train mIoU {:.4}{}",
        report.model,
        report.stop_epoch,
        serde_json::to_value(report.stop_reason)?.as_str().unwrap_or_default(),
        report.best_epoch,
        report.best_val_mean_iou,
        report.final_train_metrics.mean_iou,
        test.map_or(String::new(), |t| format!(", test mIoU {:.4}", t.mean_iou)),
    );
    println!("report: {}", path.display());
    Ok(())
}

fn print_table(report: &MetricsReport) {
    eprintln!("{:<8} {:>8}", "class", "IoU");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let cell = iou.map_or("absent".to_string(), |v| format!("{:.4}", v));
        eprintln!("{c:<8} {cell:>8}");
    }
    eprintln!("{:<8} {:>8.4}", "mean", report.mean_iou);
    eprintln!("{:<8} {:>8.4}", "pix acc", report.pixel_accuracy);
}

fn eval_cmd(ckpt: &Path, data: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let split = Split::parse(split)?;
    let (model, _) = checkpoint::load(ckpt).with_context(|| format!("cannot load {}", ckpt.display()))?;
    let ds = load_dataset(data)?;
    let scene = ds.config();
    if scene.num_classes != model.spec.num_classes {
        bail!(
            "{} predicts {} classes but the dataset has {}",
            model.spec.label(),
            model.spec.num_classes,
            scene.num_classes
        );
    }
    if (scene.height, scene.width) != model.spec.input_size {
        bail!(
            "{} expects {:?} inputs but the dataset is {}x{}",
            model.spec.label(),
            model.spec.input_size,
            scene.height,
            scene.width
        );
    }
    let samples = ds.windows(split, model.spec.order)?;
    if samples.is_empty() {
        bail!("split {split} of {} has no samples", data.display());
    }
    let report = evaluate(&model, &samples)?.report()?;
    print_table(&report);
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => ckpt.with_file_name(format!("eval_{split}.json")),
    };
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn predict(ckpt: &Path, frames: &[PathBuf], out: &Path, overlay: Option<&Path>) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt).with_context(|| format!("cannot load {}", ckpt.display()))?;
    let order = model.spec.order;
    if frames.len() != order {
        bail!("{} expected {order} frames, got {}", model.spec.label(), frames.len());
    }
    let images = frames
        .iter()
        .map(|p| read_image(p).with_context(|| format!("cannot read {}", p.display())))
        .collect::<Result<Vec<Tensor>>>()?;
    let shape = images[0].shape();
    if images.iter().any(|i| i.shape() != shape) {
        bail!("all frames must have the same size");
    }
    let (h, w) = model.spec.input_size;
    let inputs = images
        .iter()
        .map(|i| if (shape.h, shape.w) == (h, w) { Ok(i.clone()) } else { resize_bilinear(i, h, w) })
        .collect::<msfcn::Result<Vec<_>>>()?;
    let mut mask = model.predict_mask(&inputs)?;
    if (shape.h, shape.w) != (h, w) {
        mask = resize_nearest(&mask, shape.h, shape.w)?;
    }
    write_mask(out, &mask).with_context(|| format!("cannot write {}", out.display()))?;
    println!("mask: {}", out.display());
    if let Some(path) = overlay {
        let blended = blend(images.last().expect("order >= 1"), &mask)?;
        write_image(path, &blended).with_context(|| format!("cannot write {}", path.display()))?;
        println!("overlay: {}", path.display());
    }
    Ok(())
}

/// Half frame, half class color.
fn blend(frame: &Tensor, mask: &LabelMask) -> Result<Tensor> {
    let s = frame.shape();
    let plane = s.plane();
    let mut data = frame.data().to_vec();
    for (i, &label) in mask.data.iter().enumerate() {
        let color = PALETTE[label as usize % PALETTE.len()];
        for c in 0..3 {
            let v = &mut data[c * plane + i];
            *v = 0.5 * *v + 0.5 * f32::from(color[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(Shape4::new(1, 3, s.h, s.w)?, data)?)
}

fn inspect(ckpt: &Path) -> Result<()> {
    let file = checkpoint::read(ckpt).with_context(|| format!("cannot read {}", ckpt.display()))?;
    println!("model       {}", file.spec.label());
    println!("version     {}", file.version);
    println!("spec        {}", serde_json::to_string(&file.spec)?);
    println!();
    println!("{:<44} {:>18} {:>10}  checksum", "name", "shape", "count");
    for r in &file.params {
        let [n, c, h, w] = r.shape.dims();
        println!("{:<44} {:>18} {:>10}  {}", r.name, format!("{n}x{c}x{h}x{w}"), r.data.len(), r.checksum());
    }
    println!();
    println!("tensors     {}", file.params.len());
    println!("parameters  {}", file.param_count());
    match &file.optimizer {
        Some(opt) => println!("optimizer   adam, step {}", opt.t),
        None => println!("optimizer   none"),
    }
    Ok(())
}
