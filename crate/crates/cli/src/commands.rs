use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use cdformer::bench::{format_csv, run_scaling, summarize, BenchConfig, Kernel};
use cdformer::data::{generate_dataset, load_dataset, save_dataset, DatasetSpec};
use cdformer::model::{load_checkpoint, CdFormer};
use cdformer::tensor::Float;
use cdformer::training::{evaluate, train, EpochRecord, LrSchedule, LAST};
use cdformer::verify::run_suite;
use cdformer::{Error, Result};
use serde_json::json;

use crate::config::{Precision, RunConfig};
use crate::{BenchArgs, Command, EvalArgs, GenDataArgs, GradCheckArgs, Split, TaskArg, TrainArgs, EXIT_VERIFY};

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn emit(value: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
}

fn gen_data(a: GenDataArgs) -> Result<u8> {
    let mut spec = match a.task {
        TaskArg::Cls => DatasetSpec::classification(a.classes as usize, a.per_class, a.val_per_class, a.points, a.seed),
        TaskArg::Seg => DatasetSpec::part_segmentation(a.per_class, a.val_per_class, a.points, a.seed),
    };
    spec.noise = a.noise;
    if a.per_class == 0 {
        return Err(Error::Config("--per-class must be positive".into()));
    }
    let occupied = a.out.exists() && fs::read_dir(&a.out).map_err(|e| io_err(&a.out, e))?.next().is_some();
    if occupied {
        if !a.force {
            return Err(Error::Config(format!(
                "output directory `{}` is not empty (pass --force to replace it)",
                a.out.display()
            )));
        }
        fs::remove_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    }
    let ds = generate_dataset(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    save_dataset(&ds, &a.out)?;
    emit(json!({
        "out": a.out,
        "task": ds.task,
        "classes": ds.class_names,
        "train": ds.train.len(),
        "val": ds.val.len(),
    }));
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<u8> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.schedule = LrSchedule::Cosine { lr0: lr };
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.precision {
        cfg.precision = p;
    }
    if let Some(ck) = &a.resume {
        let dir = ck.parent().filter(|d| d.join(LAST) == *ck).ok_or_else(|| {
            Error::Config(format!("--resume expects a `{LAST}` checkpoint inside a run directory, got `{}`", ck.display()))
        })?;
        cfg.out_dir = dir.to_path_buf();
    }
    cfg.check_paths()?;
    cfg.train.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let channels = ds
        .train
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?
        .cloud
        .channels();
    let model = CdFormer::new(cfg.model.resolve(ds.task, channels)?)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let resolved = json!({ "model": model.config, "train": cfg.train, "precision": cfg.precision });
    let path = cfg.out_dir.join("run_config.json");
    fs::write(&path, serde_json::to_string_pretty(&resolved)? + "\n").map_err(|e| io_err(&path, e))?;

    fn go<T: Float>(model: &CdFormer, ds: &cdformer::data::Dataset, cfg: &RunConfig, resume: bool) -> Result<()> {
        let mut print = |r: &EpochRecord| {
            emit(serde_json::to_value(r).expect("record serializes"));
            ControlFlow::Continue(())
        };
        let out = train::<T>(model, ds, &cfg.train, Some(&cfg.out_dir), resume, &mut print)?;
        emit(json!({
            "done": true,
            "epochs": out.history.last().map_or(0, |r| r.epoch),
            "best_epoch": out.best.map(|b| b.0),
            "best_score": out.best.map(|b| b.1),
            "params": model.num_params(),
        }));
        Ok(())
    }
    let resume = a.resume.is_some();
    match cfg.precision {
        Precision::F32 => go::<f32>(&model, &ds, &cfg, resume)?,
        Precision::F64 => go::<f64>(&model, &ds, &cfg, resume)?,
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let ck = load_checkpoint::<f64>(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let model = CdFormer::new(ck.config.clone())?;
    if model.config.task != ds.task {
        return Err(Error::Config(format!(
            "checkpoint task {:?} does not match dataset task {:?}",
            model.config.task, ds.task
        )));
    }
    let (name, samples) = match a.split {
        Split::Train => ("train", &ds.train),
        Split::Val => ("val", &ds.val),
    };
    if samples.is_empty() {
        return Err(Error::Contract(format!("the {name} split of `{}` is empty", a.dataset.display())));
    }
    let (loss, cm) = evaluate(&model, &ck.params, samples, 0.0)?;
    let m = cm.metrics()?;
    emit(json!({
        "split": name,
        "samples": samples.len(),
        "loss": loss,
        "OA": m.oa,
        "mAcc": m.macc,
        "mIoU": m.miou,
    }));
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<u8> {
    let kernels = if a.kernels.is_empty() { Kernel::ALL.to_vec() } else { a.kernels };
    let cfg = BenchConfig {
        k: a.k,
        s: a.s,
        channels: a.channels,
        heads: a.heads,
        repeats: a.repeats,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let mut results = Vec::new();
    for k in kernels {
        results.extend(run_scaling(k, &a.ns, &cfg)?);
    }
    let csv = format_csv(&results);
    match &a.csv {
        Some(p) => fs::write(p, &csv).map_err(|e| io_err(p, e))?,
        None => print!("{csv}"),
    }
    for s in summarize(&results) {
        emit(json!({ "kernel": s.kernel, "slope": s.slope, "ns": a.ns, "k": a.k, "s": a.s }));
    }
    Ok(0)
}

fn grad_check(a: GradCheckArgs) -> Result<u8> {
    let results = run_suite(a.module.as_deref(), a.corrupt_gradient)?;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for r in &results {
        worst = worst.max(r.max_rel_error);
        failed += !r.passed() as usize;
        emit(json!({
            "module": r.module,
            "check": r.name,
            "max_rel_error": r.max_rel_error,
            "tolerance": r.tolerance,
            "passed": r.passed(),
        }));
    }
    emit(json!({ "checks": results.len(), "failed": failed, "max_rel_error": worst }));
    Ok(if failed == 0 { 0 } else { EXIT_VERIFY })
}
