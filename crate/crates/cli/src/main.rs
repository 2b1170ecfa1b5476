mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmsr_core::data::manifest::DATASET_FILE;
use mmsr_core::data::{extract_patches, make_synthetic_dataset, DatasetManifest, PatchSet};
use mmsr_core::nn::Variant;
use mmsr_core::pipeline::{evaluate_dataset, super_resolve_dataset, write_montages, METRICS_FILE};
use mmsr_core::train::{load_checkpoint, save_checkpoint, train_epochs, write_loss_csv, Trainer};
use mmsr_core::Error;

use config::Config;

#[derive(Parser)]
#[command(name = "mmsr", version, about = "Unpaired 8x CT super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    SrCyclegan,
    SrUnit,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::SrCyclegan => Variant::SrCycleGan,
            VariantArg::SrUnit => Variant::SrUnit,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clinical/micro dataset with ground truth.
    MakeSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment, normalize and sample training patches into a cache directory.
    ExtractPatches {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest or the directory holding `dataset.json`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `model.ckpt` and `losses.csv`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Patch cache from `extract-patches`; extracted on the fly otherwise.
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Super-resolve every clinical volume of a dataset.
    SuperResolve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile_size: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Score super-resolved volumes and write `metrics.json`.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory of `super-resolve`.
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write LR / SR / bicubic comparison PNGs.
    Montage {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Axial slice index; the middle slice by default.
        #[arg(long)]
        slice: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    Config::load(path).map_err(Failure::Usage)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    Ok(DatasetManifest::load(&file)?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::MakeSynthetic { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synthetic.seed = s;
            }
            let data = make_synthetic_dataset(&cfg.synthetic)?;
            create_dir(&out)?;
            let mut manifest = data.write(&out, cfg.patches_per_case, cfg.synthetic.seed)?;
            if cfg.resample_each_epoch {
                manifest.resample_each_epoch = true;
                manifest.save(&out.join(DATASET_FILE))?;
            }
            println!("wrote {}", out.join(DATASET_FILE).display());
        }
        Command::ExtractPatches { config, dataset, out } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = load_manifest(&dataset)?;
            let set = extract_patches(&manifest, cfg.train.patch_sizes, 0)?;
            set.write(&out)?;
            println!(
                "wrote {} clinical and {} micro patches to {}",
                set.clinical.len(),
                set.micro.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            dataset,
            patches,
            out,
            variant,
            seed,
            checkpoint,
        } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = load_manifest(&dataset)?;
            let mut train = cfg.train;
            if let Some(v) = variant {
                train.variant = v.into();
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            train.validate()?;
            let resumed = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let sizes = resumed.as_ref().map_or(train.patch_sizes, |(_, s)| s.config.patch_sizes);
            let epoch = resumed.as_ref().map_or(0, |(_, s)| s.epoch as u64);
            let data = match &patches {
                Some(dir) => PatchSet::read(dir)?,
                None => extract_patches(&manifest, sizes, epoch)?,
            };
            let mut trainer = match resumed {
                Some((bundle, state)) => Trainer::resume(bundle, state, data)?,
                None => Trainer::new(train, data)?,
            };
            create_dir(&out)?;
            let every = trainer.config().checkpoint_every;
            train_epochs(&mut trainer, &manifest, |t| {
                let epoch = t.state.epoch;
                if every > 0 && epoch % every == 0 {
                    save_checkpoint(&t.bundle, &t.state, &out.join(format!("ckpt-epoch-{epoch:03}.ckpt")))?;
                }
                eprintln!(
                    "epoch {epoch}: total {:.5}",
                    t.state.loss_history.last().map_or(f64::NAN, |l| l.breakdown.total)
                );
                Ok(())
            })?;
            save_checkpoint(&trainer.bundle, &trainer.state, &out.join("model.ckpt"))?;
            write_loss_csv(&out.join("losses.csv"), &trainer.state.loss_history)?;
            println!("wrote {}", out.join("model.ckpt").display());
        }
        Command::SuperResolve {
            config,
            dataset,
            checkpoint,
            out,
            tile_size,
            overlap,
        } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = load_manifest(&dataset)?;
            let (bundle, state) = load_checkpoint(&checkpoint)?;
            let tile = tile_size.unwrap_or(cfg.tile_size);
            let overlap = overlap.unwrap_or(cfg.overlap);
            let index = super_resolve_dataset(&bundle, &state.config, &manifest, tile, overlap, &out)?;
            println!("super-resolved {} volumes into {}", index.entries.len(), out.display());
        }
        Command::Evaluate { config, sr, out } => {
            load_config(config.as_deref())?;
            let report = evaluate_dataset(&sr)?;
            create_dir(&out)?;
            report.write(&out.join(METRICS_FILE))?;
            for (id, m) in &report.per_volume {
                println!(
                    "{id}: consistency mse {:.6} psnr {:.2} dB ssim {:.4}",
                    m.consistency_mse, m.consistency_psnr, m.consistency_ssim
                );
            }
            println!("wrote {}", out.join(METRICS_FILE).display());
        }
        Command::Montage { config, sr, out, slice } => {
            load_config(config.as_deref())?;
            for path in write_montages(&sr, &out, slice)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
