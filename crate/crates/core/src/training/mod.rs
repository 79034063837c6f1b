//! AdamW, learning-rate schedules, metrics and the training loop.

mod metrics;
mod optim;

pub use metrics::{ConfusionMatrix, Metrics};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, stream_rng, AugmentConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{load_checkpoint, save_checkpoint, CdFormer, CheckpointMeta, Task};
use crate::nn::ParamStore;
use crate::tensor::{strict_mode, Float, Graph};

fn default_batch() -> usize {
    8
}

fn default_smoothing() -> f64 {
    0.1
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Cosine { lr0: 1e-3 }
}

/// Stop as soon as both thresholds are met after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopAt {
    pub train_oa: f64,
    pub val_oa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Evaluated once per epoch with `t = epoch` (0-based), `T = epochs`.
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stop_at: Option<StopAt>,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            schedule: LrSchedule::Cosine { lr0: lr },
            optimizer: AdamWConfig::default(),
            label_smoothing: default_smoothing(),
            clip_grad_norm: None,
            augment: None,
            seed: 0,
            stop_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "train_OA")]
    pub train_oa: f64,
    #[serde(rename = "val_OA")]
    pub val_oa: Option<f64>,
    #[serde(rename = "val_mAcc")]
    pub val_macc: Option<f64>,
    #[serde(rename = "val_mIoU")]
    pub val_miou: Option<f64>,
    pub wall_s: f64,
}

pub struct TrainOutcome<T: Float> {
    pub params: ParamStore<T>,
    pub history: Vec<EpochRecord>,
    /// Epoch and value of the best validation score (OA, or mIoU for
    /// segmentation).
    pub best: Option<(usize, f64)>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST: &str = "best";
pub const LAST: &str = "last";

fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync + Send) -> Result<Vec<O>> {
    if strict_mode() {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn argmax_rows<T: Float>(x: &[T], u: usize) -> Vec<usize> {
    x.chunks(u)
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Loss, predictions and (optionally) parameter gradients for one cloud.
pub struct SampleResult<T> {
    pub loss: f64,
    pub preds: Vec<usize>,
    pub grads: Option<Vec<Vec<T>>>,
}

pub fn run_sample<T: Float>(
    model: &CdFormer,
    store: &ParamStore<T>,
    cloud: &PointCloud,
    targets: &[usize],
    smoothing: f64,
    with_grad: bool,
) -> Result<SampleResult<T>> {
    let geo = model.geometry(cloud.coords())?;
    let g = if with_grad { Graph::new() } else { Graph::inference() };
    let p = store.bind(&g);
    let logits = model.forward(&p, cloud, &geo)?;
    let u = model.config.task.classes();
    let preds = argmax_rows(&logits.to_vec(), u);
    let loss = logits.cross_entropy(targets, T::of(smoothing))?;
    let value = loss.item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = if with_grad {
        let grads = g.backward(loss)?;
        Some(
            p.vars()
                .iter()
                .zip(store.tensors())
                .map(|(v, t)| grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); t.numel()]))
                .collect(),
        )
    } else {
        None
    };
    Ok(SampleResult { loss: value, preds, grads })
}

fn check_task(model: &CdFormer, data: &Dataset) -> Result<()> {
    if model.config.task != data.task {
        return Err(Error::Config(format!(
            "model task {:?} does not match dataset task {:?}",
            model.config.task, data.task
        )));
    }
    if let Some(s) = data.train.first().or(data.val.first()) {
        if s.cloud.channels() != model.config.in_channels {
            return Err(Error::Config(format!(
                "model expects {} input channels, dataset has {}",
                model.config.in_channels,
                s.cloud.channels()
            )));
        }
    }
    Ok(())
}

/// Mean loss and confusion matrix over `samples`, without augmentation.
pub fn evaluate<T: Float>(
    model: &CdFormer,
    store: &ParamStore<T>,
    samples: &[Sample],
    smoothing: f64,
) -> Result<(f64, ConfusionMatrix)> {
    let task = model.config.task;
    let outs = par_map(samples, |s| {
        let targets = s.targets(&task)?;
        let r = run_sample(model, store, &s.cloud, &targets, smoothing, false)?;
        Ok((r.loss, targets, r.preds))
    })?;
    let mut cm = ConfusionMatrix::new(task.classes());
    let mut loss = 0.0;
    for (l, t, p) in &outs {
        loss += l;
        cm.add_all(t, p)?;
    }
    Ok((loss / samples.len().max(1) as f64, cm))
}

fn score(task: &Task, m: &Metrics) -> f64 {
    if task.is_segmentation() {
        m.miou
    } else {
        m.oa
    }
}

fn read_log(path: &Path, upto: usize) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: EpochRecord = serde_json::from_str(line)?;
        if r.epoch <= upto {
            out.push(r);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[EpochRecord], append: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains `model` on `data`. With `out_dir`, writes the JSON-lines log and
/// `best`/`last` checkpoints there; `resume` continues from `last`.
/// Shuffling and augmentation draw from streams keyed by
/// `(seed, epoch, sample)`, so a resumed run matches an uninterrupted one.
/// `on_epoch` sees every record and can end the run early with
/// `ControlFlow::Break`.
pub fn train<T: Float>(
    model: &CdFormer,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_task(model, data)?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let task = model.config.task;
    let mut store = model.init_params::<T>(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, store.tensors());
    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut start = 0;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(LOG_FILE);
        if resume {
            let ck = load_checkpoint::<T>(&dir.join(LAST))?;
            if ck.config != model.config {
                return Err(Error::Config("checkpoint config differs from the requested model".into()));
            }
            let (m, v) = ck
                .optimizer
                .ok_or_else(|| Error::Validation("checkpoint has no optimizer state to resume from".into()))?;
            opt = AdamW::from_state(cfg.optimizer, ck.params.tensors(), m, v, ck.meta.step)?;
            store = ck.params;
            start = ck.meta.epoch;
            best = serde_json::from_value(ck.meta.extra["best"].clone()).unwrap_or(None);
            history = read_log(&log, start)?;
            write_log(&log, &history, false)?;
        } else {
            write_log(&log, &[], false)?;
        }
    } else if resume {
        return Err(Error::Config("resume needs an output directory".into()));
    }

    let decay: Vec<bool> = store.specs().iter().map(|s| s.decay).collect();
    let n = data.train.len();
    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.schedule.lr_at(epoch as u64, cfg.epochs as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[epoch as u64, u64::MAX]));
        let mut loss_sum = 0.0;
        let mut cm = ConfusionMatrix::new(task.classes());
        for batch in order.chunks(cfg.batch_size) {
            let outs = par_map(batch, |&i| {
                let s = &data.train[i];
                let cloud = match &cfg.augment {
                    Some(a) => augment(&s.cloud, a, &mut stream_rng(cfg.seed, &[epoch as u64, i as u64]))?,
                    None => s.cloud.clone(),
                };
                let targets = s.targets(&task)?;
                let r = run_sample(model, &store, &cloud, &targets, cfg.label_smoothing, true)?;
                Ok((r, targets))
            })?;
            let scale = T::of(1.0 / batch.len() as f64);
            let mut grads: Vec<Vec<T>> = store.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
            for (r, targets) in &outs {
                loss_sum += r.loss;
                cm.add_all(targets, &r.preds)?;
                for (acc, g) in grads.iter_mut().zip(r.grads.as_ref().expect("requested gradients")) {
                    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b * scale);
                }
            }
            if let Some(max) = cfg.clip_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            opt.step(store.tensors_mut(), &grads, &decay, lr)?;
        }
        let train_metrics = cm.metrics()?;
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(model, &store, &data.val, cfg.label_smoothing)?.1.metrics()?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            step: opt.t,
            lr,
            train_loss: loss_sum / n as f64,
            train_oa: train_metrics.oa,
            val_oa: val.map(|m| m.oa),
            val_macc: val.map(|m| m.macc),
            val_miou: val.map(|m| m.miou),
            wall_s: t0.elapsed().as_secs_f64(),
        };
        let improved = match (val, best) {
            (Some(m), Some((_, b))) => score(&task, &m) > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = val.map(|m| (epoch + 1, score(&task, &m)));
        }
        if let Some(dir) = out_dir {
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                step: opt.t,
                seed: cfg.seed,
                extra: serde_json::json!({ "best": best }),
            };
            let moments = Some((opt.m.as_slice(), opt.v.as_slice()));
            save_checkpoint(&dir.join(LAST), &model.config, &meta, &store, moments)?;
            if improved {
                save_checkpoint(&dir.join(BEST), &model.config, &meta, &store, None)?;
            }
            write_log(&dir.join(LOG_FILE), std::slice::from_ref(&record), true)?;
        }
        let flow = on_epoch(&record);
        history.push(record);
        if flow.is_break() {
            break;
        }
        if let (Some(stop), Some(m)) = (cfg.stop_at, val) {
            if train_metrics.oa >= stop.train_oa && m.oa >= stop.val_oa {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: store,
        history,
        best,
    })
}
