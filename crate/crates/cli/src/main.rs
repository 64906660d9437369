use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use focus_core::checkpoint::Checkpoint;
use focus_core::config::RunConfig;
use focus_core::eval::{evaluate_dataset, mask_png};
use focus_core::imgproc::{read_png, write_png, Image};
use focus_core::io::atomic_write;
use focus_core::model::Model;
use focus_core::synth::{gen_split, read_dataset, write_dataset};
use focus_core::train::{Trainer, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "focus", version, about = "Two-query foreground segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset applied before the config file.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: data.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory, or its parent holding `train/` (default: data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: out.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, or its parent holding the split.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// E-measure variant: adaptive, mean or max (default: from the checkpoint).
        #[arg(long)]
        e_measure: Option<String>,
        /// Also write predicted masks.
        #[arg(long)]
        masks: bool,
    },
    /// Predict masks for an image or a directory of PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the first principal component of the last backbone block and
    /// its binarization side by side.
    InspectPca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_dir(data: &Path, split: &str) -> PathBuf {
    if data.join("images").is_dir() {
        data.to_path_buf()
    } else {
        data.join(split)
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Model::from_checkpoint(&ckpt)?)
}

/// Reads an input image and checks it against the model's input size.
fn load_input(model: &Model, path: &Path) -> Result<Image> {
    let mut img = read_png(path)?;
    if img.channels() == 1 {
        img = Image::new(img.height(), img.width(), 3, img.data().repeat(3))?;
    }
    let n = model.cfg.image_size;
    if img.height() != n || img.width() != n {
        bail!(
            "{} is {}x{}, but the checkpoint was trained on {n}x{n} images",
            path.display(),
            img.height(),
            img.width()
        );
    }
    Ok(img)
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        if v.is_empty() {
            bail!("no PNG files in {}", input.display());
        }
        Ok(v)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn cmd_synth(cfg: RunConfig, out: PathBuf) -> Result<()> {
    for (split, count) in [("train", cfg.synth_train), ("test", cfg.synth_test)] {
        let samples = gen_split(cfg.synth_mode, cfg.image_size, cfg.seed, split, count)?;
        write_dataset(&out.join(split), &samples)?;
        eprintln!("wrote {count} {split} samples to {}", out.join(split).display());
    }
    Ok(())
}

fn cmd_train(cfg: RunConfig, data: PathBuf, out: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let samples = read_dataset(&split_dir(&data, "train"))?;
    std::fs::create_dir_all(&out)?;
    atomic_write(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&cfg, &samples, &out, &Checkpoint::load(&p)?)?,
        None => Trainer::new(&cfg, &samples, &out)?,
    };
    eprintln!(
        "training on {} samples, {} parameters, steps {}..{}",
        samples.len(),
        trainer.model.store.numel(),
        trainer.step,
        cfg.iterations
    );
    let t0 = Instant::now();
    trainer.run(|log| {
        if log.step % 50 == 0 || log.step == 1 {
            eprintln!(
                "step {:5}  loss {:.4}  clip {:.4}  mask {:.4}  |g| {:.2e}  {:.0}s",
                log.step,
                log.loss.total,
                log.loss.clip,
                log.loss.mask,
                log.grad_norm,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    eprintln!("saved {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    data: PathBuf,
    split: String,
    out: PathBuf,
    e_measure: Option<String>,
    masks: bool,
) -> Result<()> {
    let model = load_model(&checkpoint)?;
    let dir = split_dir(&data, &split);
    let samples = read_dataset(&dir)?;
    for s in &samples {
        let n = model.cfg.image_size;
        if s.image.height() != n || s.image.width() != n {
            bail!("sample {} is {}x{}, checkpoint expects {n}x{n}", s.id, s.image.height(), s.image.width());
        }
    }
    let e = match e_measure {
        Some(v) => v.parse()?,
        None => model.cfg.e_measure,
    };
    let report = evaluate_dataset(&model, &samples, e)?;
    report.write(&out, &dir.to_string_lossy(), e, masks)?;
    let a = &report.aggregate;
    println!(
        "{} images  S {:.4}  E {:.4}  wF {:.4}  MAE {:.4}  BER {:.2}  F {:.4}  F1 {:.4}  AUC {:.4}",
        report.images.len(),
        a.s_measure,
        a.e_measure,
        a.weighted_fbeta,
        a.mae,
        a.ber,
        a.fbeta,
        a.f1,
        a.auc
    );
    Ok(())
}

fn cmd_infer(checkpoint: PathBuf, input: PathBuf, out: PathBuf) -> Result<()> {
    let model = load_model(&checkpoint)?;
    for path in png_inputs(&input)? {
        let img = load_input(&model, &path)?;
        let moi = model.predict(&img)?;
        let dest = out.join(format!("{}.png", stem(&path)));
        atomic_write(&dest, &mask_png(&moi)?)?;
        eprintln!("{} -> {}", path.display(), dest.display());
    }
    Ok(())
}

fn cmd_inspect_pca(checkpoint: PathBuf, input: PathBuf, out: PathBuf) -> Result<()> {
    let model = load_model(&checkpoint)?;
    for path in png_inputs(&input)? {
        let img = load_input(&model, &path)?;
        let (scores, binary, (gh, gw)) = model.pca_maps(&img)?;
        let (h, w) = (gh * 16, gw * 16);
        let up = |m: &[f64]| nearest_upscale(m, gh, gw, 16);
        let (a, b) = (up(&scores), up(&binary));
        let mut data = vec![0.0; h * 2 * w];
        for y in 0..h {
            data[y * 2 * w..y * 2 * w + w].copy_from_slice(&a[y * w..(y + 1) * w]);
            data[y * 2 * w + w..(y + 1) * 2 * w].copy_from_slice(&b[y * w..(y + 1) * w]);
        }
        let dest = out.join(format!("{}_pca.png", stem(&path)));
        write_png(&dest, &Image::new(h, 2 * w, 1, data)?)?;
        eprintln!("{} -> {}", path.display(), dest.display());
    }
    Ok(())
}

/// Each cell repeated `k` × `k` times.
fn nearest_upscale(m: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    (0..oh * ow).map(|i| m[(i / ow / k) * w + (i % ow) / k]).collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { cfg, out } => {
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            cmd_synth(cfg, out)
        }
        Command::Train { cfg, data, out, resume } => {
            let cfg = cfg.resolve()?;
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_train(cfg, data, out, resume)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            e_measure,
            masks,
        } => cmd_eval(checkpoint, data, split, out, e_measure, masks),
        Command::Infer { checkpoint, input, out } => cmd_infer(checkpoint, input, out),
        Command::InspectPca { checkpoint, input, out } => cmd_inspect_pca(checkpoint, input, out),
    }
}
