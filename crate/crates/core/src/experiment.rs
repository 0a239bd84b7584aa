//! Experiment configuration and the pretrain / finetune / eval / search /
//! count-params workflows behind the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mamba::{init_store, paths, MambaConfig, ModelError, ParamStore};
use crate::peft::{count_trainable_params, AdapterSet, PeftError, PeftSpec};
use crate::search::{
    run_hybrid_search, HybridConfig, HybridReport, SearchError, StepDefaults, TrialOutcome,
};
use crate::search::tpe::TpeConfig;
use crate::tensor::TensorError;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::train::tasks::TaskSpec;
use crate::train::{evaluate, final_val_accuracy, train, EpochMetrics, TrainError, TrainingConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ExperimentError {
    /// Stable CLI contract: 0 ok, 2 config error, 3 numerical abort,
    /// 4 resume conflict.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Search(SearchError::SpaceHashMismatch { .. }) => 4,
            ExperimentError::Train(e) if e.is_numerical() => 3,
            ExperimentError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Apply the configured PEFT specs over the frozen base.
    #[default]
    Peft,
    /// Update every base parameter.
    Full,
    /// Train only the classification head.
    LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSection {
    pub n1: usize,
    pub n2: usize,
    #[serde(default)]
    pub tpe: TpeConfig,
    /// Tasks whose mean final validation accuracy is the objective.
    /// Empty means the experiment's own task.
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_true")]
    pub use_projection: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: MambaConfig,
    pub task: TaskSpec,
    pub training: TrainingConfig,
    #[serde(default)]
    pub mode: FinetuneMode,
    #[serde(default)]
    pub peft: Vec<PeftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.model
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.task.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Marks the task head trainable (it is re-fit for downstream tasks).
fn unfreeze_head(store: &mut ParamStore) -> Result<()> {
    store.set_trainable(paths::HEAD_WEIGHT, true)?;
    store.set_trainable(paths::HEAD_BIAS, true)?;
    Ok(())
}

/// Applies the experiment's trainability policy and returns the adapter set.
pub fn prepare_finetune(
    store: &mut ParamStore,
    config: &ExperimentConfig,
) -> Result<AdapterSet> {
    match config.mode {
        FinetuneMode::Peft => {
            if config.peft.is_empty() {
                return Err(ExperimentError::Config(
                    "peft mode requires a non-empty peft list (or pick mode=full / linear-probe)"
                        .into(),
                ));
            }
            let set = AdapterSet::apply_all(
                store,
                &config.model,
                &config.peft,
                config.training.seed,
            )?;
            if config.training.train_head {
                unfreeze_head(store)?;
            }
            Ok(set)
        }
        FinetuneMode::Full => {
            if !config.peft.is_empty() {
                return Err(ExperimentError::Config(
                    "full fine-tuning does not take peft specs".into(),
                ));
            }
            for path in store.paths().cloned().collect::<Vec<_>>() {
                store.set_trainable(&path, true)?;
            }
            Ok(AdapterSet::new())
        }
        FinetuneMode::LinearProbe => {
            if !config.peft.is_empty() {
                return Err(ExperimentError::Config(
                    "linear probing does not take peft specs".into(),
                ));
            }
            store.freeze_all();
            unfreeze_head(store)?;
            Ok(AdapterSet::new())
        }
    }
}

/// Trains (or, with zero epochs, just evaluates) and returns the final
/// validation accuracy plus the history.
fn run_training(
    store: &mut ParamStore,
    config: &ExperimentConfig,
    set: &AdapterSet,
    task: &TaskSpec,
) -> Result<(Vec<EpochMetrics>, f64)> {
    if config.training.epochs == 0 {
        let (_, val) = crate::train::tasks::make_task(task)?;
        let (loss, acc) = evaluate(store, &config.model, set, &val, config.training.batch_size)?;
        let history = vec![EpochMetrics {
            epoch: 0,
            split: "val".into(),
            loss,
            acc,
        }];
        return Ok((history, acc));
    }
    let history = train(store, &config.model, set, task, &config.training)?;
    let acc = final_val_accuracy(&history).unwrap_or(0.0);
    Ok((history, acc))
}

#[derive(Debug)]
pub struct PretrainResult {
    pub history: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Trains from scratch on the base task and freezes the result as the
/// pretrained snapshot.
pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path) -> Result<PretrainResult> {
    if !config.peft.is_empty() {
        return Err(ExperimentError::Config(
            "pretraining takes an empty peft list".into(),
        ));
    }
    let mut store = init_store(&config.model, config.training.seed)?;
    let history = if config.training.epochs > 0 {
        train(
            &mut store,
            &config.model,
            &AdapterSet::new(),
            &config.task,
            &config.training,
        )?
    } else {
        Vec::new()
    };
    store
        .snapshot_pretrained()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    save_checkpoint(&store, out)?;
    Ok(PretrainResult {
        history,
        checkpoint: out.to_path_buf(),
    })
}

#[derive(Debug)]
pub struct FinetuneResult {
    pub history: Vec<EpochMetrics>,
    pub final_val_acc: f64,
    pub trainable_params: usize,
    pub labels: Vec<String>,
}

/// Applies the configured specs (or mode) to a pretrained checkpoint and
/// trains on the downstream task.
pub fn cmd_finetune(
    config: &ExperimentConfig,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<FinetuneResult> {
    let mut store = load_checkpoint(checkpoint)?;
    let set = prepare_finetune(&mut store, config)?;
    let trainable_params = count_trainable_params(&store);
    let labels: Vec<String> = match config.mode {
        FinetuneMode::Peft => set.adapters().iter().map(|a| a.spec.label()).collect(),
        FinetuneMode::Full => vec!["Full".into()],
        FinetuneMode::LinearProbe => vec!["Linear probing".into()],
    };
    let (history, final_val_acc) = run_training(&mut store, config, &set, &config.task)?;
    if let Some(path) = out {
        save_checkpoint(&store, path)?;
    }
    Ok(FinetuneResult {
        history,
        final_val_acc,
        trainable_params,
        labels,
    })
}

#[derive(Debug)]
pub struct EvalResult {
    pub loss: f64,
    pub acc: f64,
}

/// Evaluates a checkpoint (attaching configured specs to their saved
/// parameters) on the task's validation split.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<EvalResult> {
    let mut store = load_checkpoint(checkpoint)?;
    let set = AdapterSet::attach_all(
        &mut store,
        &config.model,
        &config.peft,
        config.training.seed,
    )?;
    let (_, val) = crate::train::tasks::make_task(&config.task)?;
    let (loss, acc) = evaluate(&store, &config.model, &set, &val, config.training.batch_size)?;
    Ok(EvalResult { loss, acc })
}

/// The objective the hybrid search optimizes: mean final validation accuracy
/// over the task subset, evaluated by fine-tuning a fresh copy of the
/// pretrained store under each trial's specs.
pub fn trial_objective(
    base: &ParamStore,
    config: &ExperimentConfig,
    tasks: &[TaskSpec],
    specs: &[PeftSpec],
) -> TrialOutcome {
    let mut total = 0.0;
    for task in tasks {
        let mut store = base.clone();
        let set = match AdapterSet::apply_all(&mut store, &config.model, specs, config.training.seed)
        {
            Ok(s) => s,
            Err(e) => return TrialOutcome::Failed(e.to_string()),
        };
        if config.training.train_head {
            if unfreeze_head(&mut store).is_err() {
                return TrialOutcome::Failed("head parameters missing".into());
            }
        }
        let trial_config = ExperimentConfig {
            task: task.clone(),
            ..config.clone()
        };
        match run_training(&mut store, &trial_config, &set, task) {
            Ok((_, acc)) => total += acc,
            Err(e) => return TrialOutcome::Failed(e.to_string()),
        }
    }
    TrialOutcome::Objective(total / tasks.len() as f64)
}

pub struct SearchRunResult {
    pub report: HybridReport,
    pub best_config: ExperimentConfig,
    pub best_config_path: PathBuf,
    pub log_path: PathBuf,
}

/// Runs the two-step search against a pretrained checkpoint, persists every
/// trial, and writes the winning spec list as a config usable directly by
/// the finetune command.
pub fn cmd_search(
    config: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    log: Option<&Path>,
    workers: usize,
) -> Result<SearchRunResult> {
    let section = config
        .search
        .clone()
        .ok_or_else(|| ExperimentError::Config("search block missing from config".into()))?;
    let base = load_checkpoint(checkpoint)?;
    let tasks = if section.tasks.is_empty() {
        vec![config.task.clone()]
    } else {
        section.tasks.clone()
    };
    for t in &tasks {
        t.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
    }
    let hybrid = HybridConfig {
        n1: section.n1,
        n2: section.n2,
        tpe: section.tpe,
        seed: config.training.seed,
        eval_seed: config.training.seed,
        workers,
        use_projection: section.use_projection,
        defaults: StepDefaults {
            lr: config.training.base_lr,
            wd_additive: config.training.weight_decay,
            wd_partial: crate::peft::DEFAULT_ANCHOR_DECAY,
        },
    };
    let log_path = match log {
        Some(p) => p.to_path_buf(),
        None => out.with_extension("trials.jsonl"),
    };
    let evaluate = |specs: &[PeftSpec]| trial_objective(&base, config, &tasks, specs);
    let report = run_hybrid_search(&hybrid, evaluate, Some(&log_path))?;
    let best_config = ExperimentConfig {
        model: config.model.clone(),
        task: tasks[0].clone(),
        training: config.training.clone(),
        mode: FinetuneMode::Peft,
        peft: report.final_specs.clone(),
        search: None,
    };
    best_config.save(out)?;
    Ok(SearchRunResult {
        report,
        best_config,
        best_config_path: out.to_path_buf(),
        log_path,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCountRow {
    pub label: String,
    pub params: usize,
    pub formula: Option<usize>,
}

pub struct CountResult {
    pub rows: Vec<ParamCountRow>,
    pub total: usize,
}

/// Per-spec trainable-parameter rows plus the composed total, matching the
/// store enumeration.
pub fn cmd_count_params(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<CountResult> {
    let mut store = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let mut s = init_store(&config.model, config.training.seed)?;
            s.snapshot_pretrained()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            s
        }
    };
    let set = prepare_count(&mut store, config)?;
    let mut rows = Vec::new();
    for adapter in set.adapters() {
        rows.push(ParamCountRow {
            label: adapter.spec.label(),
            params: adapter.enumerated_count(&store),
            formula: adapter.spec.param_count(&config.model).ok(),
        });
    }
    let head_trainable = store.is_trainable(paths::HEAD_WEIGHT);
    if head_trainable {
        let head = store.get(paths::HEAD_WEIGHT).map(|t| t.numel()).unwrap_or(0)
            + store.get(paths::HEAD_BIAS).map(|t| t.numel()).unwrap_or(0);
        rows.push(ParamCountRow {
            label: "head".into(),
            params: head,
            formula: Some(config.model.d_model * config.model.n_classes + config.model.n_classes),
        });
    }
    let total = count_trainable_params(&store);
    Ok(CountResult { rows, total })
}

// Like prepare_finetune but an empty peft list is fine (frozen model).
fn prepare_count(store: &mut ParamStore, config: &ExperimentConfig) -> Result<AdapterSet> {
    match config.mode {
        FinetuneMode::Peft if config.peft.is_empty() => {
            store.freeze_all();
            if config.training.train_head {
                unfreeze_head(store)?;
            }
            Ok(AdapterSet::new())
        }
        _ => prepare_finetune(store, config),
    }
}
