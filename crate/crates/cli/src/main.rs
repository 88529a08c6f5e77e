mod bench;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vssmseg_core::harness::{
    evaluate, gen_synthetic, load_dataset, save_dataset, train, Dataset, RunConfig, TrainOptions,
};
use vssmseg_core::harness::train::{CONFIG_FILE, METRICS_HEADER};
use vssmseg_core::{ModelStats, VmUnet};

#[derive(Parser)]
#[command(name = "vssmseg", version, about = "State-space UNet segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an ellipse segmentation dataset.
    GenData {
        #[arg(long)]
        n: usize,
        /// `N` or `HxW`; multiples of 32.
        #[arg(long, default_value = "64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a `key = value` config; writes config.txt, metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parameter and operation counts.
    Stats {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        preset: String,
        #[arg(long)]
        csv: bool,
    },
    /// Time the recurrent or convolutional scan; CSV on stdout.
    Bench {
        #[arg(long, value_enum)]
        mode: bench::Mode,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 64, 256, 1024])]
        lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [16])]
        states: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [16])]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parse = |v: &str| v.trim().parse::<usize>().with_context(|| format!("bad size {s:?}"));
    match s.split_once('x') {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn datasets(run: &RunConfig) -> Result<(Dataset, Dataset)> {
    match (&run.data.path, &run.data.val_path) {
        (Some(t), Some(v)) => Ok((
            load_dataset(t).with_context(|| format!("loading {}", t.display()))?,
            load_dataset(v).with_context(|| format!("loading {}", v.display()))?,
        )),
        _ => {
            let (h, w) = run.model.input_size;
            let all = gen_synthetic(run.data.train_samples + run.data.val_samples, h, w, run.data.seed)?;
            Ok(all.split_at(run.data.train_samples))
        }
    }
}

fn cmd_train(config: &Path, out: &Path, threads: Option<usize>, quiet: bool) -> Result<()> {
    let run = RunConfig::from_file(config)?;
    let (tr, va) = datasets(&run)?;
    let t0 = std::time::Instant::now();
    let outcome = train(&run, &tr, &va, &TrainOptions { out_dir: Some(out), threads, verbose: !quiet })?;
    let (epoch, dsc) = outcome.best;
    println!(
        "{} steps in {:.1}s; best val DSC {dsc:.4} at epoch {epoch}; artifacts in {}",
        outcome.steps,
        t0.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, config: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let config = match config {
        Some(c) => c.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let run = RunConfig::from_file(&config).with_context(|| format!("reading {}", config.display()))?;
    let mut model = VmUnet::<f32>::new(run.model.clone(), 0)?;
    model.load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data = load_dataset(data)?;
    let e = evaluate(&model, &data, run.train.loss, threads)?;
    let m = e.metrics;
    println!("{METRICS_HEADER}");
    println!("-,eval,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", e.loss, m.miou, m.dsc, m.acc, m.sen, m.spe);
    Ok(())
}

fn cmd_stats(config: Option<&Path>, preset: &str, csv: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::from_file(p)?.model,
        None => match vssmseg_core::harness::config::preset(preset) {
            Some(c) => c,
            None => bail!("unknown preset {preset:?} (full, desk, micro)"),
        },
    };
    let (h, w) = cfg.input_size;
    let m = VmUnet::<f32>::new(cfg, 0)?;
    let s = ModelStats::of(&m, h, w);
    if csv {
        print!("{}", s.to_csv());
    } else {
        print!("{s}");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { n, size, seed, out } => {
            let (h, w) = parse_size(&size)?;
            let d = gen_synthetic(n, h, w, seed)?;
            save_dataset(&out, &d)?;
            println!("wrote {n} samples of {h}x{w} to {}", out.display());
        }
        Command::Train { config, out, threads, quiet } => cmd_train(&config, &out, threads, quiet)?,
        Command::Eval { ckpt, data, config, threads } => cmd_eval(&ckpt, &data, config.as_deref(), threads)?,
        Command::Stats { config, preset, csv } => cmd_stats(config.as_deref(), &preset, csv)?,
        Command::Bench { mode, lens, states, channels, reps, seed } => {
            println!("{}", bench::CSV_HEADER);
            for &l in &lens {
                for &n in &states {
                    for &d in &channels {
                        println!("{}", bench::row(mode, l, n, d, reps, seed)?);
                    }
                }
            }
        }
    }
    Ok(())
}
