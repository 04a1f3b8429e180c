//! The training loop: batches, the objective, Adam updates, checkpoints and
//! the JSON-lines log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::autograd::Tape;
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::contextual::build_sample_set;
use crate::data::{assemble_batch, derive_seed, make_batches, Batch, DatasetManifest, ManifestSource, RecordSource};
use crate::error::{Error, Result};
use crate::fusion_net::FusionNet;
use crate::nn::{apply_bn_updates, Ctx, Mode};
use crate::optim::{clip_global_norm, Adam};
use crate::pixel_losses::{ablation_total_loss, total_loss, LossReport};
use crate::tensor::Tensor;

pub struct Trainer {
    cfg: TrainConfig,
    net: FusionNet,
    backbone: Backbone,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, backbone: Backbone) -> Result<Self> {
        cfg.validate()?;
        let net = FusionNet::new(cfg.effective_net(), derive_seed(cfg.seed, &[0x1e17]))?;
        let adam = Adam::new(cfg.learning_rate, net.store().params().iter().map(|(_, t)| t.shape().to_vec()));
        Ok(Self { cfg, net, backbone, adam, step: 0 })
    }

    /// Continue from a checkpoint. `cfg` may change the run length or
    /// logging but not the network.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig, backbone: Backbone) -> Result<Self> {
        cfg.validate()?;
        ck.check_net(&cfg.effective_net())?;
        let net = ck.build_net()?;
        let mut adam = Adam::new(cfg.learning_rate, std::iter::empty());
        adam.t = ck.adam_t;
        adam.m = ck.adam_m.clone();
        adam.v = ck.adam_v.clone();
        Ok(Self { cfg, net, backbone, adam, step: ck.step })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &FusionNet {
        &self.net
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = self.net.store();
        Checkpoint {
            step: self.step,
            config: self.cfg.clone(),
            net: self.net.config().clone(),
            backbone: self.backbone.kind().name().to_owned(),
            params: store.params().to_vec(),
            buffers: store.buffers().to_vec(),
            adam_t: self.adam.t,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    /// Batch for the optimizer step with 0-based index `step`.
    pub fn batch_for_step(&self, source: &dyn RecordSource, step: u64) -> Result<Batch> {
        let per_epoch = batches_per_epoch(source.len(), self.cfg.batch_size)?;
        let (epoch, index) = (step / per_epoch, step % per_epoch);
        let batches = make_batches(source.len(), self.cfg.batch_size, self.cfg.group_n, self.cfg.seed, epoch)?;
        assemble_batch(source, &batches[index as usize], &self.cfg.patch, self.cfg.group_n, self.cfg.seed, epoch, index)
    }

    /// Objective and parameter gradients on `batch`, without updating.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(LossReport, Vec<Tensor>, Vec<(crate::nn::BufferId, Tensor)>)> {
        let tape = Tape::new();
        let params = self.net.store().bind(&tape);
        let ctx = Ctx::new(&tape, &params, self.net.store(), Mode::Train);
        let f = self.net.forward(&ctx, tape.constant(batch.vi.clone()), tape.constant(batch.ir.clone()))?;
        let ccfg = self.cfg.effective_contrastive();
        let (loss, report) = if self.cfg.variant.uses_mask_loss() {
            ablation_total_loss(f, &batch.vi, &batch.ir, &batch.partitions, &ccfg, &self.cfg.weights, self.cfg.ablation_ir_target)?
        } else {
            let set = build_sample_set(f, &batch.vi, &batch.ir, &batch.partitions, batch.group_n, &ccfg)?;
            total_loss(f, &batch.vi, &batch.ir, &set, &ccfg, &self.cfg.weights, &self.backbone)?
        };
        if !report.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                components: serde_json::to_string(&report)?,
            });
        }
        let grads = tape.backward(loss);
        let g = params.iter().map(|&p| grads.wrt_or_zeros(p)).collect();
        Ok((report, g, ctx.take_bn_updates()))
    }

    /// One Adam step on `batch`; the report describes the objective before
    /// the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let (report, mut grads, bn) = self.loss_and_grads(batch)?;
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        self.adam.step(self.net.store_mut().params_mut(), &grads);
        apply_bn_updates(self.net.store_mut(), bn);
        self.step += 1;
        Ok(report)
    }

    /// Fetch the next batch from `source` and train on it.
    pub fn advance(&mut self, source: &dyn RecordSource) -> Result<LossReport> {
        let batch = self.batch_for_step(source, self.step)?;
        self.train_step(&batch)
    }
}

pub fn batches_per_epoch(records: usize, batch_size: usize) -> Result<u64> {
    let n = records / batch_size.max(1);
    if n == 0 {
        return Err(Error::Config(format!("dataset has {records} records, fewer than one batch of {batch_size}")));
    }
    Ok(n as u64)
}

/// One line of the training log. Terms the objective does not contain are
/// omitted.
pub fn log_line(step: u64, epoch: u64, report: &LossReport, uses_mask_loss: bool, elapsed_ms: u128) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    let obj = v.as_object_mut().expect("report is an object");
    let drop: &[&str] = if uses_mask_loss { &["int", "unique", "share", "bg", "con"] } else { &["abl"] };
    for k in drop {
        obj.remove(*k);
    }
    let mut line = serde_json::Map::new();
    line.insert("step".into(), step.into());
    line.insert("epoch".into(), epoch.into());
    line.extend(std::mem::take(obj));
    line.insert("elapsed_ms".into(), (elapsed_ms as u64).into());
    Ok(serde_json::to_string(&line)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub variant: String,
    pub backbone: String,
    pub backbone_source: String,
    pub records: usize,
    pub batches_per_epoch: u64,
    /// Records left out of every epoch by drop-last batching.
    pub dropped_per_epoch: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    /// Report of the first step run in this invocation.
    pub first: Option<LossReport>,
    pub last: Option<LossReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn last_checkpoint_path(out: &Path) -> PathBuf {
    out.join("last.ckpt")
}

pub fn log_path(out: &Path) -> PathBuf {
    out.join("log.jsonl")
}

/// Train from a manifest into `out`.
pub fn run(cfg: TrainConfig, manifest: &Path, out: &Path, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let backbone = Backbone::from_weights(cfg.backbone_weights.as_deref())?;
    let source = ManifestSource::new(DatasetManifest::load(manifest)?, &cfg.split);
    run_with(cfg, &source, backbone, out, resume)
}

/// Train on any record source, writing `log.jsonl`, `run.json`,
/// `checkpoints/step-NNNNNN.ckpt` and `last.ckpt` under `out`. With
/// `resume`, continues from `last.ckpt` when present.
pub fn run_with(cfg: TrainConfig, source: &dyn RecordSource, backbone: Backbone, out: &Path, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let per_epoch = batches_per_epoch(source.len(), cfg.batch_size)?;
    let last = last_checkpoint_path(out);
    let mut trainer = if resume && last.exists() {
        Trainer::resume(&Checkpoint::load(&last)?, cfg.clone(), backbone)?
    } else {
        Trainer::new(cfg.clone(), backbone)?
    };
    let manifest = RunManifest {
        variant: cfg.variant.name().into(),
        backbone: trainer.backbone.kind().name().into(),
        backbone_source: trainer.backbone.source().map_or_else(|| "builtin".into(), |p| p.display().to_string()),
        records: source.len(),
        batches_per_epoch: per_epoch,
        dropped_per_epoch: source.len() - per_epoch as usize * cfg.batch_size,
        config: cfg.clone(),
    };
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let log = log_path(out);
    let kept = truncate_log(&log, trainer.step)?;
    let mut log_file = std::fs::File::create(&log)?;
    log_file.write_all(kept.as_bytes())?;

    let started = Instant::now();
    let (mut first, mut last_report) = (None, None);
    while trainer.step < cfg.steps {
        let report = trainer.advance(source)?;
        let step = trainer.step;
        let line = log_line(step, (step - 1) / per_epoch, &report, cfg.variant.uses_mask_loss(), started.elapsed().as_millis())?;
        writeln!(log_file, "{line}")?;
        first.get_or_insert(report);
        last_report = Some(report);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save_checkpoint(&trainer, out)?;
        }
    }
    log_file.flush()?;
    save_checkpoint(&trainer, out)?;
    Ok(RunSummary {
        steps: trainer.step,
        first,
        last: last_report,
        checkpoint: last,
        log,
    })
}

fn save_checkpoint(trainer: &Trainer, out: &Path) -> Result<()> {
    let ck = trainer.checkpoint();
    ck.save(&out.join("checkpoints").join(format!("step-{:06}.ckpt", ck.step)))?;
    ck.save(&last_checkpoint_path(out))
}

/// Log lines for steps up to `step`, so a resumed run rewrites the rest.
fn truncate_log(path: &Path, step: u64) -> Result<String> {
    if step == 0 || !path.exists() {
        return Ok(String::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}
