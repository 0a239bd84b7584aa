//! Deterministic training loop: same config and seed reproduce every float.

pub mod checkpoint;
pub mod optim;
pub mod tasks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mamba::{Forward, MambaConfig, ModelError, ParamStore};
use crate::peft::{AdapterSet, PeftError};
use crate::tensor::TensorError;

use checkpoint::CheckpointError;
use optim::{adamw_step, OptimizerState, Schedule};
use tasks::{make_task, Dataset, TaskSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("missing gradient for trainable path `{0}`")]
    MissingGrad(String),
    #[error("invalid task: {0}")]
    Task(String),
}

impl TrainError {
    /// Numerical failures become a sentinel objective during search instead
    /// of aborting the run.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NanLoss { .. } | TrainError::Tensor(TensorError::NonFinite { .. })
        ) || matches!(
            self,
            TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-4
}
fn default_warmup() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    pub seed: u64,
    /// Whether the classification head trains during fine-tuning. The frozen
    /// base invariants are checked with this off.
    #[serde(default = "default_true")]
    pub train_head: bool,
}

impl TrainingConfig {
    pub fn desk_default(seed: u64) -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: default_batch(),
            base_lr: default_lr(),
            weight_decay: default_wd(),
            warmup_frac: default_warmup(),
            seed,
            train_head: true,
        }
    }
}

/// One metrics record, emitted per epoch and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
}

/// Mean loss and accuracy of the model (with adapters) over a dataset.
pub fn evaluate(
    store: &ParamStore,
    cfg: &MambaConfig,
    adapters: &AdapterSet,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut start = 0usize;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let batch = &data.tokens[start..end];
        let labels = &data.labels[start..end];
        let fwd = Forward::new(store, cfg, adapters.hook_set());
        let logits = fwd.logits(batch)?;
        let loss = logits.softmax_cross_entropy(labels)?.value().as_scalar()?;
        if !loss.is_finite() {
            return Err(TrainError::NanLoss { epoch: 0 });
        }
        total_loss += loss * batch.len() as f64;
        correct += count_correct(&logits.value(), labels);
        seen += batch.len();
        start = end;
    }
    Ok((total_loss / seen as f64, correct as f64 / seen as f64))
}

fn count_correct(logits: &crate::tensor::Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            pred == label
        })
        .count()
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Trains the store in place and returns per-epoch train/val metrics.
/// A non-finite loss aborts with a status the search layer turns into a
/// sentinel objective.
pub fn train(
    store: &mut ParamStore,
    cfg: &MambaConfig,
    adapters: &AdapterSet,
    task: &TaskSpec,
    tcfg: &TrainingConfig,
) -> Result<Vec<EpochMetrics>, TrainError> {
    let (train_set, val_set) = make_task(task)?;
    let steps_per_epoch = train_set.len().div_ceil(tcfg.batch_size);
    let total_steps = tcfg.epochs * steps_per_epoch;
    let schedule = Schedule {
        total_steps,
        warmup_steps: (tcfg.warmup_frac * total_steps as f64).round() as usize,
        peak_lr: tcfg.base_lr,
    };
    let mut opt = OptimizerState::new(store, tcfg.weight_decay, adapters.optimizer_policies());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ SHUFFLE_TAG);
    let mut history = Vec::with_capacity(tcfg.epochs * 2);
    for epoch in 0..tcfg.epochs {
        let order = shuffled_indices(train_set.len(), &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<Vec<usize>> =
                chunk.iter().map(|&i| train_set.tokens[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let fwd = Forward::new(store, cfg, adapters.hook_set());
            let logits = fwd.logits(&batch)?;
            let loss_var = logits.softmax_cross_entropy(&labels)?;
            let loss = loss_var.value().as_scalar()?;
            if !loss.is_finite() {
                return Err(TrainError::NanLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            correct += count_correct(&logits.value(), &labels);
            fwd.backward(&loss_var)?;
            let grads = fwd.trainable_grads();
            adamw_step(store, &mut opt, &grads, &schedule)?;
        }
        history.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: epoch_loss / train_set.len() as f64,
            acc: correct as f64 / train_set.len() as f64,
        });
        let (val_loss, val_acc) = evaluate(store, cfg, adapters, &val_set, tcfg.batch_size)?;
        history.push(EpochMetrics {
            epoch,
            split: "val".into(),
            loss: val_loss,
            acc: val_acc,
        });
    }
    Ok(history)
}

/// Final validation accuracy of a history (the search objective per task).
pub fn final_val_accuracy(history: &[EpochMetrics]) -> Option<f64> {
    history
        .iter()
        .rev()
        .find(|m| m.split == "val")
        .map(|m| m.acc)
}

const SHUFFLE_TAG: u64 = 0x73687566666c65; // "shuffle"
