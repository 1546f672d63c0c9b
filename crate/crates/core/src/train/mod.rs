//! Optimization: AdamW, the step schedule, checkpoints and the training loop.

mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{adamw_step, decays, OptimState, NO_DECAY_SUFFIXES};
pub use schedule::{effective_milestones, lr_at};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{augment, collate, AugmentConfig, ClassInfo, Sample};
use crate::error::{Error, Result};
use crate::metrics::{longtail_report, ConfusionMatrix, LongTailReport};
use crate::model::{self, ModelConfig};
use crate::numerics::{Graph, ParamSet};
use crate::objective::{total_loss, LabelMask, LossConfig};
use crate::rng::{hash_words, SplitMix64};

const SHUFFLE_TAG: u64 = 0x7368_7566;
const AUGMENT_TAG: u64 = 0x6175_676d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub gamma: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`, expressed
    /// for a `reference_epochs`-long run.
    pub milestones: Vec<usize>,
    pub reference_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub resolution: usize,
    /// Evaluate on the held-out split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            eps: 1e-8,
            gamma: 0.1,
            milestones: vec![80, 200],
            reference_epochs: 300,
            epochs: 300,
            batch_size: 8,
            seed: 0,
            resolution: 64,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly ascending: {:?}", self.milestones));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("betas must lie in [0, 1), eps must be positive, weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        crate::data::check_resolution(self.resolution)
    }
}

/// Everything a training run needs besides the data.
pub struct TrainRun<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub augment: &'a AugmentConfig,
    pub catalog: &'a [ClassInfo],
    /// Effective configuration, stored verbatim in checkpoints.
    pub config_text: String,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Report of the last evaluation, if any ran.
    pub last_eval: Option<LongTailReport>,
}

fn write_record(log: &mut dyn Write, record: &serde_json::Value) -> Result<()> {
    writeln!(log, "{record}").map_err(|e| Error::io("<metrics log>", e))
}

/// Argmax predictions of the model on `samples`, accumulated into a
/// confusion matrix.
pub fn evaluate(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    samples: &[Sample],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model::num_classes(model, params)?);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = collate(&refs)?;
        let logits = model::predict_logits(params, model, &images)?;
        cm.accumulate(&LabelMask::argmax(&logits)?, &masks)?;
    }
    Ok(cm)
}

/// Deterministic training: seeded per-epoch shuffling, one AdamW step per
/// batch, JSON-lines records for every step and evaluation.
pub fn train_loop(
    run: &TrainRun,
    train_set: &[Sample],
    eval_set: &[Sample],
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let cfg = run.train;
    cfg.validate()?;
    run.loss.validate()?;
    run.augment.validate()?;
    let n = run.catalog.len();
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    for s in train_set.iter().chain(eval_set) {
        if (s.height(), s.width()) != (cfg.resolution, cfg.resolution) {
            return Err(Error::Validation(format!(
                "sample is {}x{} but training resolution is {}",
                s.height(),
                s.width(),
                cfg.resolution
            )));
        }
        s.mask.validate(n)?;
    }
    let mut params = model::init_model::<f32>(run.model, n)?;
    let mut optim = OptimState::new(&params);
    let mut shuffle_rng = SplitMix64::new(hash_words(&[cfg.seed, SHUFFLE_TAG]));
    let mut step = 0u64;
    let mut last_eval = None;
    let snapshot = |params: &ParamSet<f32>, optim: &OptimState<f32>, step, epoch, rng: &SplitMix64| Checkpoint {
        config: run.config_text.clone(),
        params: params.clone(),
        optim: optim.clone(),
        step,
        epoch,
        rng_state: rng.state(),
    };
    let save = |ck: &Checkpoint| -> Result<()> {
        match out_dir {
            Some(dir) => ck.save(&dir.join("checkpoint.bin")),
            None => Ok(()),
        }
    };

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| {
                    let mut rng = SplitMix64::new(hash_words(&[cfg.seed, epoch as u64, i as u64, AUGMENT_TAG]));
                    augment(&train_set[i], run.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (images, masks) = collate(&refs)?;

            let mut g = Graph::new();
            let x = g.constant(images);
            let out = model::forward(&mut g, &params, run.model, x, None)?;
            let loss = total_loss(g.value(out.logits), &masks, run.loss)?;
            step += 1;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step} (last checkpoint retained)"
                )));
            }
            let grads = g.backward(out.logits, loss.grad)?;
            adamw_step(&mut params, &grads, &mut optim, lr, cfg)?;
            write_record(
                log,
                &json!({
                    "event": "step",
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_total": loss.total,
                    "loss_ce": loss.ce,
                    "loss_dice": loss.dice,
                }),
            )?;
        }
        let done = epoch + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !eval_set.is_empty() {
            let cm = evaluate(&params, run.model, eval_set, cfg.batch_size)?;
            let report = longtail_report(&cm, run.catalog)?;
            let mut record = report.to_record();
            record["epoch"] = json!(epoch);
            record["step"] = json!(step);
            write_record(log, &record)?;
            last_eval = Some(report);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            save(&snapshot(&params, &optim, step, done as u64, &shuffle_rng))?;
        }
    }
    let checkpoint = snapshot(&params, &optim, step, cfg.epochs as u64, &shuffle_rng);
    save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        last_eval,
    })
}
