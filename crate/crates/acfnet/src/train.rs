//! Training and evaluation drivers with on-disk run directories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use acfnet_core::heads::SplitMetrics;
use acfnet_core::model::ModelConfig;
use acfnet_core::trainer::{EpochReport, Trainer};
use serde_json::json;

use crate::checkpoint;
use crate::config::RunSettings;
use crate::data::Dataset;
use crate::error::{AppError, Result};
use crate::io;

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const CONFIG: &str = "config.txt";

/// Emits one JSON log line on stderr.
pub fn log(event: &str, mut fields: serde_json::Value) {
    if let Some(map) = fields.as_object_mut() {
        map.insert("event".into(), event.into());
    }
    eprintln!("{fields}");
}

/// The model configuration `settings` describes, sized to `data`.
pub fn model_config(settings: &RunSettings, data: &Dataset) -> Result<ModelConfig> {
    let cfg = ModelConfig { input_extents: data.extents()?, ..settings.model.clone() };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from `out_dir/checkpoint.ckpt` if present.
    pub resume: bool,
    /// Stop after this many epochs in this invocation (for interruption tests).
    pub max_epochs_this_run: Option<usize>,
    pub quiet: bool,
}

fn start(settings: &RunSettings, data: &Dataset, opts: &TrainOptions) -> Result<Trainer> {
    let ckpt = opts.out_dir.join(CHECKPOINT);
    if opts.resume && ckpt.exists() {
        let mut t = checkpoint::load(&ckpt)?;
        if t.net.cfg != model_config(settings, data)? || t.cfg.variant != settings.train.variant {
            return Err(AppError::Usage(format!(
                "{} was written for a different model or variant",
                ckpt.display()
            )));
        }
        t.cfg.epochs = settings.train.epochs;
        // keep exactly the reports of completed epochs
        let metrics = opts.out_dir.join(METRICS);
        let kept: Vec<EpochReport> = if metrics.exists() { io::read_jsonl(&metrics)? } else { Vec::new() };
        let kept: Vec<&EpochReport> = kept.iter().filter(|r| r.epoch <= t.epoch).collect();
        io::write_bytes(&metrics, b"")?;
        for r in kept {
            io::append_jsonl(&metrics, r)?;
        }
        return Ok(t);
    }
    let t = Trainer::new(model_config(settings, data)?, settings.train.clone(), &data.train)?;
    io::write_bytes(&opts.out_dir.join(CONFIG), settings.to_text().as_bytes())?;
    io::write_bytes(&opts.out_dir.join(METRICS), b"")?;
    Ok(t)
}

/// Trains until `cfg.epochs`, appending one report per epoch to
/// `metrics.jsonl` and refreshing the checkpoint after each epoch.
pub fn train(settings: &RunSettings, data: &Dataset, opts: &TrainOptions) -> Result<Trainer> {
    let mut t = start(settings, data, opts)?;
    let mut ran = 0;
    while t.epoch < t.cfg.epochs && opts.max_epochs_this_run.is_none_or(|m| ran < m) {
        let clock = Instant::now();
        let report = t.run_epoch(&data.train, &data.val)?;
        io::append_jsonl(&opts.out_dir.join(METRICS), &report)?;
        checkpoint::save(&opts.out_dir.join(CHECKPOINT), &t)?;
        ran += 1;
        if !opts.quiet {
            log(
                "epoch",
                json!({
                    "epoch": report.epoch,
                    "epochs": t.cfg.epochs,
                    "lr": report.lr,
                    "train_total": report.train.total,
                    "val_total": report.val.total,
                    "val_recurrence_taa": report.val_recurrence_taa,
                    "seconds": clock.elapsed().as_secs_f64(),
                }),
            );
        }
    }
    Ok(t)
}

/// Trains in memory without touching the disk.
pub fn train_in_memory(model: ModelConfig, settings: &RunSettings, data: &Dataset) -> Result<(Trainer, Vec<EpochReport>)> {
    let mut t = Trainer::new(model, settings.train.clone(), &data.train)?;
    let mut reports = Vec::new();
    while t.epoch < t.cfg.epochs {
        reports.push(t.run_epoch(&data.train, &data.val)?);
    }
    Ok((t, reports))
}

/// Evaluates a checkpoint on one split and writes `eval_<split>.json`.
pub fn eval_checkpoint(ckpt: &Path, data: &Dataset, split: &str, out: &Path) -> Result<SplitMetrics> {
    let t = checkpoint::load(ckpt)?;
    let samples = data.split(split)?;
    if t.net.cfg.input_extents != data.extents()? {
        return Err(AppError::Usage(format!(
            "checkpoint expects extents {:?}, data has {:?}",
            t.net.cfg.input_extents,
            data.extents()?
        )));
    }
    let (ev, _) = t.evaluate(split, samples, false)?;
    io::write_json(&out.join(format!("eval_{split}.json")), &ev.metrics)?;
    Ok(ev.metrics)
}
