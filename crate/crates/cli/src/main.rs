use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use medmatting::harness::{
    cross_validate, evaluate, load_checkpoint, load_dataset, prepare_dataset, save_checkpoint, save_metrics_csv,
    synth_dataset_with, write_dataset, write_xval_csv, RegionMode, Sample, Summary, TrainConfig, Trainer,
};
use medmatting::imaging::{load_image, save_alpha, save_entropy_map};
use medmatting::maskgen::max_entropy;
use medmatting::MattingError;

/// Medical image matting with uncertainty-guided training.
#[derive(Parser)]
#[command(name = "medmatting", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; a `preset` key selects lidc-idri, isic or brain-growth.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth alpha and annotator masks.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of samples; defaults to `synth_count`.
        #[arg(long)]
        count: Option<usize>,
        /// Side length; defaults to `input_size`.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Fuse per-annotator masks into trimaps and write a manifest.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Directory with images/, masks/<annotator>/ and optionally alpha/.
        #[arg(long)]
        input: PathBuf,
        /// Resample everything to this side length and write copies.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model; synthesizes data from the config when --data is absent.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset and write metrics.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `all` or `unknown`.
        #[arg(long, default_value = "all")]
        region: RegionMode,
    },
    /// Write alpha and uncertainty PNGs for each input image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        /// Prior samples per image; defaults to `n_samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// K-fold cross-validation with per-fold and aggregate metrics.
    Xval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        region: RegionMode,
    },
}

fn dataset(cfg: &TrainConfig, manifest: Option<&Path>) -> Result<Vec<Sample>> {
    Ok(match manifest {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        None => synth_dataset_with(&cfg.synth(), cfg.synth_count, cfg.input_size, cfg.seed)?,
    })
}

fn run_train(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out_dir()?;
    cfg.save(out.join("config.toml"))?;
    let samples = dataset(&cfg, data)?;
    let mut trainer = Trainer::new(&cfg, &samples)?;
    while !trainer.is_finished() {
        match trainer.run_epoch() {
            Ok(e) => eprintln!(
                "epoch {:>4}  lr {:.3e}  total {:.5}  alpha_l1 {:.5}",
                e.epoch, e.lr, e.losses.total, e.losses.alpha_l1
            ),
            Err(MattingError::Diverged(msg)) => {
                std::fs::write(out.join("divergence.txt"), format!("{msg}\n"))?;
                save_checkpoint(out.join("diverged.ckpt"), trainer.model(), &cfg, trainer.epoch())?;
                trainer.log().save_csv(out.join("train_log.csv"))?;
                bail!("training diverged: {msg}");
            }
            Err(e) => return Err(e.into()),
        }
        let done = trainer.epoch();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !trainer.is_finished() {
            save_checkpoint(out.join(format!("epoch_{done:04}.ckpt")), trainer.model(), &cfg, done)?;
        }
    }
    trainer.log().save_csv(out.join("train_log.csv"))?;
    save_checkpoint(out.join("model.ckpt"), trainer.model(), &cfg, trainer.epoch())?;
    eprintln!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, count, size } => {
            let cfg = common.config()?;
            let out = common.out_dir()?;
            let samples = synth_dataset_with(
                &cfg.synth(),
                count.unwrap_or(cfg.synth_count),
                size.unwrap_or(cfg.input_size),
                cfg.seed,
            )?;
            let manifest = write_dataset(&samples, out, Some(cfg.dilation_radius))?;
            eprintln!("wrote {} samples to {}", samples.len(), manifest.display());
        }
        Command::Prepare { common, input, size } => {
            let cfg = common.config()?;
            let out = common.out_dir()?;
            let manifest = prepare_dataset(&input, out, cfg.dilation_radius, size)?;
            eprintln!("wrote {}", manifest.display());
        }
        Command::Train { common, data } => run_train(&common, data.as_deref())?,
        Command::Evaluate {
            common,
            checkpoint,
            data,
            region,
        } => {
            let (model, mut cfg, _) =
                load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            if let Some(p) = &common.config {
                let over = TrainConfig::load(p)?;
                cfg.eval_masks = over.eval_masks;
                cfg.dilation_radius = over.dilation_radius;
            }
            let seed = common.seed.unwrap_or(cfg.seed);
            let samples = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let rows = evaluate(&model, &samples, region, cfg.eval_masks, cfg.dilation_radius, seed)?;
            let out = common.out_dir()?;
            save_metrics_csv(out.join("metrics.csv"), &rows, region)?;
            let s = Summary::of(&rows);
            eprintln!(
                "{} samples  sad {:.4}  mse {:.5}  ged {:.4}  dice {:.4}",
                rows.len(),
                s.sad.mean,
                s.mse.mean,
                s.ged.mean,
                s.dice.mean
            );
        }
        Command::Predict {
            common,
            checkpoint,
            input,
            samples,
        } => {
            let (model, cfg, _) =
                load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let n = samples.unwrap_or(cfg.n_samples);
            let out = common.out_dir()?;
            for path in &input {
                let image = load_image(path).with_context(|| format!("loading {}", path.display()))?;
                let p = model.predict(&image, n, seed)?;
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .with_context(|| format!("no file name in {}", path.display()))?;
                save_alpha(&p.alpha, out.join(format!("{stem}_alpha.png")))?;
                save_entropy_map(p.uncertainty.values(), max_entropy(2), out.join(format!("{stem}_uncertainty.png")))?;
            }
        }
        Command::Xval { common, data, region } => {
            let cfg = common.config()?;
            let out = common.out_dir()?;
            cfg.save(out.join("config.toml"))?;
            let samples = dataset(&cfg, data.as_deref())?;
            let report = cross_validate(&cfg, &samples, region)?;
            for f in &report.folds {
                save_metrics_csv(out.join(format!("fold_{}.csv", f.fold)), &f.rows, region)?;
            }
            write_xval_csv(std::fs::File::create(out.join("xval.csv"))?, &report)?;
            let [sad, _, _, _, ged, dice] = report.aggregate;
            eprintln!(
                "{} folds  sad {:.4}±{:.4}  ged {:.4}±{:.4}  dice {:.4}±{:.4}",
                report.folds.len(),
                sad.mean,
                sad.std,
                ged.mean,
                ged.std,
                dice.mean,
                dice.std
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
