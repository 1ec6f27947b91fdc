//! Training loop, evaluation and the training report.
//!
//! Per epoch the training windows are visited in a permutation drawn from
//! `(seed, epoch)`, one Adam step per minibatch on the cross-entropy averaged
//! over all pixels of the batch. After each epoch the model is scored on the
//! validation windows and early stopping watches the validation mean IoU.
//! At the end the parameters of the best epoch are restored.
//!
//! Nothing else is random, so a run is a pure function of the model, the
//! data and the config; resuming from the last checkpoint replays the
//! uninterrupted run exactly.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::{collate, VideoSample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{argmax_mask, Model};
use crate::optim::{AdamHyper, AdamState, EarlyStopping, Verdict};
use crate::rng::Rng;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps; the epoch in progress is cut short
    /// and still validated.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamHyper::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 2,
            max_epochs: 30,
            patience: 3,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::param(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far, over all epochs.
    pub steps: u64,
    pub train_loss: f64,
    pub val_mean_iou: f64,
    pub val_pixel_accuracy: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    MaxSteps,
}

/// Trainer bookkeeping stored in the last checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    run_id: String,
    steps: u64,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    early: EarlyStopping,
    epochs: Vec<EpochRecord>,
    stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_id: String,
    pub model: String,
    pub param_count: usize,
    pub config: TrainConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    /// Loss of the very first and very last minibatch.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_epoch: usize,
    pub best_val_mean_iou: f64,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    /// Metrics of the restored best parameters on the training windows.
    pub final_train_metrics: MetricsReport,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    /// Wall-clock fields live here so the rest of the report is reproducible.
    pub timestamps: Timestamps,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Content hash of everything that determines a run.
pub fn run_id(model: &Model, config: &TrainConfig, train: &[VideoSample], val: &[VideoSample]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.spec).unwrap_or_default());
    h.update(serde_json::to_vec(config).unwrap_or_default());
    for p in model.params.iter() {
        h.update(p.name.as_bytes());
        p.value.data().iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    for (tag, set) in [(b"train", train), (b"valid", val)] {
        h.update(tag);
        for s in set {
            h.update(s.sequence.as_bytes());
            h.update((s.frame as u64).to_le_bytes());
        }
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// One confusion matrix over every pixel of `samples`.
pub fn evaluate(model: &Model, samples: &[VideoSample]) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate on an empty split"));
    }
    let mut cm = ConfusionMatrix::new(model.spec.num_classes);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&VideoSample> = chunk.iter().collect();
        let (frames, mask) = collate(&refs)?;
        let logits = model.infer(&frames)?;
        cm.update(&argmax_mask(&logits), &mask, None)?;
    }
    Ok(cm)
}

/// Mean cross-entropy of one minibatch; accumulates parameter gradients.
fn batch_step(model: &mut Model, batch: &[&VideoSample]) -> Result<f64> {
    let (frames, mask) = collate(batch)?;
    mask.check_labels(model.spec.num_classes, None)?;
    let mut tape = Tape::new();
    let vars: Vec<_> = frames.into_iter().map(|f| tape.constant(f)).collect();
    let logits = model.forward(&mut tape, &vars)?;
    let loss = tape.softmax_cross_entropy(logits, &mask, None)?;
    let value = f64::from(tape.value(loss).data()[0]);
    if !value.is_finite() {
        return Ok(value);
    }
    model.params.zero_grads();
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut model.params);
    Ok(value)
}

struct Run<'a> {
    model: &'a mut Model,
    state: AdamState,
    progress: Progress,
    best: Option<Vec<Vec<f32>>>,
    config: &'a TrainConfig,
    train: &'a [VideoSample],
    val: &'a [VideoSample],
    out_dir: Option<&'a Path>,
}

impl Run<'_> {
    fn snapshot(&self) -> Vec<Vec<f32>> {
        self.model.params.iter().map(|p| p.value.data().to_vec()).collect()
    }

    fn save_checkpoints(&self, improved: bool) -> Result<()> {
        let Some(dir) = self.out_dir else { return Ok(()) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if improved {
            checkpoint::save(&dir.join(BEST_CHECKPOINT), self.model, None)?;
        }
        let progress = serde_json::to_value(&self.progress)?;
        checkpoint::save(&dir.join(LAST_CHECKPOINT), self.model, Some((&self.state, &progress)))
    }

    fn epoch(&mut self, epoch: usize) -> Result<Verdict> {
        let adam = self.config.adam();
        let order = Rng::derive(self.config.seed, epoch as u64).permutation(self.train.len());
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| self.progress.steps >= m) {
                self.progress.stop = Some(StopReason::MaxSteps);
                break;
            }
            let batch: Vec<&VideoSample> = idx.iter().map(|&i| &self.train[i]).collect();
            let loss = batch_step(self.model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: self.progress.steps,
                    message: format!("loss is {loss} in epoch {epoch}"),
                });
            }
            self.state.step(&mut self.model.params, &adam)?;
            self.progress.steps += 1;
            self.progress.initial_loss.get_or_insert(loss);
            self.progress.final_loss = Some(loss);
            loss_sum += loss;
            batches += 1;
        }
        if self.config.max_steps.is_some_and(|m| self.progress.steps >= m) {
            self.progress.stop = Some(StopReason::MaxSteps);
        }

        let val = evaluate(self.model, self.val)?;
        let val_mean_iou = val.mean_iou()?;
        let verdict = self.progress.early.observe(val_mean_iou);
        let improved = verdict == Verdict::Improved;
        if improved {
            self.best = Some(self.snapshot());
        }
        self.progress.epochs.push(EpochRecord {
            epoch,
            steps: self.progress.steps,
            train_loss: if batches == 0 { f64::NAN } else { loss_sum / batches as f64 },
            val_mean_iou,
            val_pixel_accuracy: val.pixel_accuracy()?,
            improved,
        });
        if verdict == Verdict::Stop {
            self.progress.stop = Some(StopReason::EarlyStopping);
        } else if self.progress.stop.is_none() && epoch == self.config.max_epochs {
            self.progress.stop = Some(StopReason::MaxEpochs);
        }
        self.save_checkpoints(improved)?;
        Ok(verdict)
    }

    fn finish(mut self, started: u64, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainReport> {
        while self.progress.stop.is_none() {
            let epoch = self.progress.epochs.len() + 1;
            self.epoch(epoch)?;
            on_epoch(self.progress.epochs.last().unwrap());
        }
        let best = self.best.take().unwrap_or_else(|| self.snapshot());
        for (p, v) in self.model.params.iter_mut().zip(best) {
            p.value.data_mut().copy_from_slice(&v);
        }
        let final_train_metrics = evaluate(self.model, self.train)?.report()?;
        let (best_epoch, best_val) = self.progress.early.best.unwrap_or((0, f64::NAN));
        let p = self.progress;
        Ok(TrainReport {
            run_id: p.run_id,
            model: self.model.spec.label(),
            param_count: self.model.param_count(),
            config: self.config.clone(),
            train_samples: self.train.len(),
            val_samples: self.val.len(),
            stop_epoch: p.epochs.len(),
            epochs: p.epochs,
            steps: p.steps,
            initial_loss: p.initial_loss.unwrap_or(f64::NAN),
            final_loss: p.final_loss.unwrap_or(f64::NAN),
            best_epoch,
            best_val_mean_iou: best_val,
            stop_reason: p.stop.expect("loop ends with a stop reason"),
            final_train_metrics,
            best_checkpoint: self.out_dir.map(|d| d.join(BEST_CHECKPOINT)),
            last_checkpoint: self.out_dir.map(|d| d.join(LAST_CHECKPOINT)),
            timestamps: Timestamps {
                started_unix: started,
                finished_unix: unix_now(),
            },
        })
    }
}

fn check_inputs(model: &Model, config: &TrainConfig, train: &[VideoSample], val: &[VideoSample]) -> Result<()> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data(format!(
            "training needs non-empty splits, got {} train and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.frames.len() != model.spec.order) {
        return Err(Error::data(format!(
            "{} expects {} frames per sample, sample {}#{} has {}",
            model.spec.label(),
            model.spec.order,
            s.sequence,
            s.frame,
            s.frames.len()
        )));
    }
    Ok(())
}

/// Trains `model` in place and leaves it holding the best epoch's
/// parameters. With `out_dir`, writes `best.ckpt` whenever validation
/// improves and `last.ckpt` (with optimizer state) after every epoch.
pub fn train(
    model: &mut Model,
    train: &[VideoSample],
    val: &[VideoSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    check_inputs(model, config, train, val)?;
    let started = unix_now();
    let progress = Progress {
        run_id: run_id(model, config, train, val),
        steps: 0,
        initial_loss: None,
        final_loss: None,
        early: EarlyStopping::new(config.patience),
        epochs: Vec::new(),
        stop: None,
    };
    let state = AdamState::new(&model.params);
    Run {
        model,
        state,
        progress,
        best: None,
        config,
        train,
        val,
        out_dir,
    }
    .finish(started, on_epoch)
}

/// Continues a run from the checkpoints in `out_dir`, which must come from
/// [`train`] with the same data and config.
pub fn resume(
    out_dir: &Path,
    train: &[VideoSample],
    val: &[VideoSample],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    let last = checkpoint::read(&out_dir.join(LAST_CHECKPOINT))?;
    let mut model = last.build_model()?;
    check_inputs(&model, config, train, val)?;
    let state = last
        .adam_state(&model)?
        .ok_or_else(|| Error::format(0, "last checkpoint has no optimizer section"))?;
    let progress_json = &last.optimizer.as_ref().expect("checked above").progress;
    let progress: Progress = serde_json::from_value(progress_json.clone())?;
    let best = match progress.early.best {
        Some(_) => {
            let file = checkpoint::read(&out_dir.join(BEST_CHECKPOINT))?;
            let mut best_model = file.build_model()?;
            file.apply_to(&mut best_model)?;
            Some(best_model.params.iter().map(|p| p.value.data().to_vec()).collect())
        }
        None => None,
    };
    let started = unix_now();
    let report = Run {
        model: &mut model,
        state,
        progress,
        best,
        config,
        train,
        val,
        out_dir: Some(out_dir),
    }
    .finish(started, on_epoch)?;
    Ok((model, report))
}
