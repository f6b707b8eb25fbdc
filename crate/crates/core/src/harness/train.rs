//! Training and evaluation loops.
//!
//! Every sample is differentiated on its own tape. Per-sample gradients are
//! summed in fixed groups of four and the group sums are then added in batch
//! order, so the result does not depend on how many workers ran.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{AdamW, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::data::{synth_dataset, SynthSample};
use crate::init::rng;
use crate::model::Model;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "DEFSCAN_THREADS";
const REDUCTION_GROUP: usize = 4;

pub const METRICS_HEADER: &str = "step,lr,loss,train_acc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const META_FILE: &str = "meta.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?}",
            self.step, self.lr, self.loss, self.train_acc
        )
    }
}

pub struct TrainReport {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    /// Accuracy over the whole training set after the last step.
    pub train_acc: f64,
    pub eval_acc: f64,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Gradient, summed loss and number correct over some samples.
struct Partial {
    grads: Vec<f64>,
    loss: f64,
    correct: usize,
}

impl Partial {
    fn merge(&mut self, other: Partial) {
        self.grads
            .iter_mut()
            .zip(&other.grads)
            .for_each(|(a, b)| *a += b);
        self.loss += other.loss;
        self.correct += other.correct;
    }
}

fn sample_grads(
    model: &Model,
    sample: &SynthSample,
    scale: f64,
    smoothing: f64,
) -> Result<Partial> {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let img = tape.constant(sample.image.clone());
    let trace = model.forward(&mut tape, &bound, img)?;
    let correct = argmax(tape.value(trace.logits).data()) == sample.label;
    let loss = tape.cross_entropy(trace.logits, &[sample.label], smoothing)?;
    let loss_value = tape.value(loss).data()[0];
    let scaled = tape.scale(loss, scale)?;
    let grads = tape.backward(scaled)?;
    Ok(Partial {
        grads: ParamStore::flat_grads(&bound, &grads, model.store()),
        loss: loss_value,
        correct: usize::from(correct),
    })
}

/// Mean-loss gradient over `batch`, plus summed loss and number correct.
pub fn batch_gradient(
    model: &Model,
    batch: &[&SynthSample],
    smoothing: f64,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<f64>, f64, usize)> {
    if batch.is_empty() {
        return Err(Error::config("batch must not be empty"));
    }
    let scale = 1.0 / batch.len() as f64;
    let groups: Vec<Result<Partial>> = pool.install(|| {
        batch
            .par_chunks(REDUCTION_GROUP)
            .map(|group| {
                let mut acc = sample_grads(model, group[0], scale, smoothing)?;
                for s in &group[1..] {
                    acc.merge(sample_grads(model, s, scale, smoothing)?);
                }
                Ok(acc)
            })
            .collect()
    });
    let mut groups = groups.into_iter();
    let mut total = groups.next().expect("non-empty batch")?;
    for g in groups {
        total.merge(g?);
    }
    Ok((total.grads, total.loss, total.correct))
}

/// Fraction of `samples` classified correctly.
pub fn evaluate(model: &Model, samples: &[SynthSample], pool: &rayon::ThreadPool) -> Result<f64> {
    let hits: Result<Vec<bool>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| Ok(argmax(model.logits(&s.image)?.data()) == s.label))
            .collect()
    });
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

fn write_line(f: &mut File, path: &Path, line: &str) -> Result<()> {
    f.write_all(format!("{line}\n").as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// Runs the configured training. With `out_dir`, writes the metrics CSV,
/// a metadata file, the configuration and a final checkpoint there.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    train_with(cfg, out_dir, |_| {})
}

pub fn train_with(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let train_set = synth_dataset(cfg.data.kind, cfg.data.train_size, cfg.data.seed)?;
    let eval_set = synth_dataset(
        cfg.data.kind,
        cfg.data.eval_size,
        cfg.data.seed.wrapping_add(1),
    )?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(&bad) = train_set
        .iter()
        .map(|s| &s.label)
        .find(|&&l| l >= cfg.model.num_classes)
    {
        return Err(Error::config(format!(
            "dataset label {bad} exceeds model.num_classes = {}",
            cfg.model.num_classes
        )));
    }
    let mut opt = AdamW::new(cfg.optim.adamw(), model.store());
    let schedule = cfg.optim.schedule(cfg.train.steps);

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            write_line(&mut f, &path, METRICS_HEADER)?;
            let meta = dir.join(META_FILE);
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            std::fs::write(&meta, format!("started_unix = {stamp}\n"))
                .map_err(|e| Error::io(&meta, e))?;
            let conf = dir.join(CONFIG_FILE);
            std::fs::write(&conf, cfg.to_text()).map_err(|e| Error::io(&conf, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut order_rng = rng(cfg.train.seed ^ 0x005e_ed0f_da7a);
    let mut perm: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut metrics = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        while batch.len() < cfg.train.batch_size {
            if cursor == perm.len() {
                perm = (0..train_set.len()).collect();
                perm.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&train_set[perm[cursor]]);
            cursor += 1;
        }
        let lr = schedule.lr_at(step);
        let (grads, loss_sum, correct) =
            match batch_gradient(&model, &batch, cfg.optim.label_smoothing, &pool) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        step: step + 1,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
        let loss = loss_sum / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                loss,
            });
        }
        let store = model.store_mut();
        store.zero_grads();
        store.accumulate_flat(&grads);
        opt.step(store, lr);
        let m = StepMetrics {
            step: step + 1,
            lr,
            loss,
            train_acc: correct as f64 / batch.len() as f64,
        };
        if let Some((f, path)) = metrics_file.as_mut() {
            write_line(f, path, &m.csv_line())?;
        }
        on_step(&m);
        metrics.push(m);
    }

    let train_acc = evaluate(&model, &train_set, &pool)?;
    let eval_acc = evaluate(&model, &eval_set, &pool)?;
    if let Some(dir) = out_dir {
        Checkpoint::from_model(&model, cfg).save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainReport {
        model,
        metrics,
        train_acc,
        eval_acc,
    })
}
