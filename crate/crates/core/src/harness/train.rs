//! Training and evaluation loops.
//!
//! Each sample of a batch gets its own tape; samples run on a rayon pool and
//! their gradients are summed in batch order, so results do not depend on the
//! thread count.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, AugmentDraw};
use super::config::{RunConfig, TrainConfig};
use super::data::{Dataset, Sample};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::cosine_lr;
use crate::error::{Error, Result};
use crate::loss::{confusion, metrics, multi_head_loss, ConfusionCounts, LossWeights, Metrics, THRESHOLD};
use crate::net::VmUnet;
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{Tape, Tensor};

pub const THREADS_ENV: &str = "VSSMSEG_THREADS";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.vmck";
pub const FINAL_CHECKPOINT: &str = "final.vmck";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_HEADER: &str = "epoch,split,loss,miou,dsc,acc,sen,spe";

/// Worker count: `VSSMSEG_THREADS` if set, else the available parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub metrics: Metrics,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.split.as_str(),
            self.loss,
            m.miou,
            m.dsc,
            m.acc,
            m.sen,
            m.spe
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean per-sample loss over all heads.
    pub loss: f64,
    /// Counts of the final head.
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Receives `metrics.csv` and the checkpoints.
    pub out_dir: Option<&'a Path>,
    /// Falls back to [`thread_count`] when `None`.
    pub threads: Option<usize>,
    /// Prints one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VmUnet<f32>,
    pub history: Vec<EpochRecord>,
    /// `(epoch, val DSC)` of the best checkpoint.
    pub best: (usize, f64),
    pub steps: usize,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.history {
            s += &r.csv_row();
            s.push('\n');
        }
        s
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.history.iter().rev().find(|r| r.split == split)
    }
}

struct SampleResult {
    loss: f64,
    counts: ConfusionCounts,
    grads: Option<Vec<Tensor<f32>>>,
}

fn as_batch(s: &Sample) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    Ok((s.image.reshape(vec![1, 3, h, w])?, s.mask.reshape(vec![1, 1, h, w])?))
}

fn run_sample(model: &VmUnet<f32>, s: &Sample, w: LossWeights, grad: bool) -> Result<SampleResult> {
    let (x, y) = as_batch(s)?;
    let tape = Tape::new();
    let p = if grad { model.params.leaves(&tape) } else { model.params.constants(&tape) };
    let heads = model.forward(&p, &tape.constant(x))?;
    let loss = multi_head_loss(&heads, &y, w)?;
    let probs = heads[0].value().map(sigmoid_scalar);
    let counts = confusion(&probs, &y, THRESHOLD)?;
    let grads = if grad { Some(p.gradients(&tape.backward(&loss)?)) } else { None };
    Ok(SampleResult { loss: loss.value().item()? as f64, counts, grads })
}

fn check_data(model: &VmUnet<f32>, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract(format!("{what} set is empty")));
    }
    let want = model.config.input_size;
    if (data.height, data.width) != want {
        return Err(Error::Contract(format!(
            "{what} set is {}x{}, model expects {}x{}",
            data.height, data.width, want.0, want.1
        )));
    }
    Ok(())
}

fn evaluate_in(pool: &rayon::ThreadPool, model: &VmUnet<f32>, data: &Dataset, w: LossWeights) -> Result<Evaluation> {
    let results: Vec<SampleResult> =
        pool.install(|| data.samples.par_iter().map(|s| run_sample(model, s, w, false)).collect::<Result<_>>())?;
    let mut counts = ConfusionCounts::default();
    let mut loss = 0.0;
    for r in &results {
        counts += r.counts;
        loss += r.loss;
    }
    let loss = loss / results.len().max(1) as f64;
    Ok(Evaluation { loss, counts, metrics: metrics(&counts) })
}

/// Loss and metrics of the final head over `data`, without augmentation.
pub fn evaluate(model: &VmUnet<f32>, data: &Dataset, w: LossWeights, threads: Option<usize>) -> Result<Evaluation> {
    check_data(model, data, "evaluation")?;
    let pool = pool(threads.map_or_else(thread_count, Ok)?)?;
    evaluate_in(&pool, model, data, w)
}

fn open_csv(dir: &Path) -> Result<fs::File> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(METRICS_FILE))?;
    writeln!(f, "{METRICS_HEADER}")?;
    Ok(OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?)
}

/// Builds the model from `run` (seeded by `run.train.seed`), writes `config.txt`, then trains.
pub fn train(run: &RunConfig, train_set: &Dataset, val_set: &Dataset, opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    run.validate()?;
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), run.to_text())?;
    }
    let model = VmUnet::new(run.model.clone(), run.train.seed)?;
    train_model(model, &run.train, train_set, val_set, opts)
}

/// Epoch loop: shuffle, augment, per-sample gradients, mean, AdamW. Validation after every epoch;
/// the checkpoint with the highest validation DSC (earliest on ties) is kept.
pub fn train_model(
    mut model: VmUnet<f32>,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(&model, train_set, "training")?;
    check_data(&model, val_set, "validation")?;
    let pool = pool(opts.threads.map_or_else(thread_count, Ok)?)?;
    let mut csv = opts.out_dir.map(open_csv).transpose()?;
    let mut opt = AdamW::new(&model.params, AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let square = train_set.height == train_set.width;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let lr = cosine_lr(epoch, cfg.t_max, cfg.lr_init, cfg.lr_min);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut seen, mut counts) = (0.0, 0usize, ConfusionCounts::default());
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let results: Vec<SampleResult> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let d = AugmentDraw::for_sample(cfg.seed, epoch, i, cfg.augment, square);
                        run_sample(&model, &augment(&train_set.samples[i], d), cfg.loss, true)
                    })
                    .collect::<Result<_>>()
            })?;
            let scale = 1.0 / batch.len() as f32;
            let mut total: Option<Vec<Tensor<f32>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                batch_loss += r.loss;
                counts += r.counts;
                let g = r.grads.expect("tracked sample");
                match total.as_mut() {
                    None => total = Some(g),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&g) {
                            a.add_assign(b)?;
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite { what: format!("training loss in epoch {}", epoch + 1), step: steps + 1 });
            }
            let grads: Vec<Tensor<f32>> = total.expect("non-empty batch").iter().map(|g| g.scale(scale)).collect();
            opt.step(&mut model.params, &grads, lr).map_err(|e| e.tagged(format!("epoch {} step {}", epoch + 1, steps + 1)))?;
            steps += 1;
            loss_sum += batch_loss;
            seen += batch.len();
        }

        let train_rec = EpochRecord {
            epoch: epoch + 1,
            split: Split::Train,
            loss: loss_sum / seen.max(1) as f64,
            metrics: metrics(&counts),
        };
        let val = evaluate_in(&pool, &model, val_set, cfg.loss)?;
        let val_rec = EpochRecord { epoch: epoch + 1, split: Split::Val, loss: val.loss, metrics: val.metrics };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  steps {:>5}  train loss {:.4} dsc {:.4}  val loss {:.4} dsc {:.4}",
                epoch + 1,
                lr,
                steps,
                train_rec.loss,
                train_rec.metrics.dsc,
                val_rec.loss,
                val_rec.metrics.dsc
            );
        }
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", train_rec.csv_row())?;
            writeln!(f, "{}", val_rec.csv_row())?;
        }
        if best.map_or(true, |(_, d)| val.metrics.dsc > d) {
            best = Some((epoch + 1, val.metrics.dsc));
            if let Some(dir) = opts.out_dir {
                model.save(dir.join(BEST_CHECKPOINT))?;
            }
        }
        history.push(train_rec);
        history.push(val_rec);
    }
    if let Some(dir) = opts.out_dir {
        model.save(dir.join(FINAL_CHECKPOINT))?;
    }
    let best = best.ok_or_else(|| Error::Contract("no epoch ran (max_steps = 0)".into()))?;
    Ok(TrainOutcome { model, history, best, steps })
}
