//! Two-step hybrid PEFT search. Step 1 samples boolean method combinations
//! at fixed parameter-minimal settings; step 2 searches the winning methods'
//! hyperparameters plus one categorical dimension that may remove a method.
//! Both steps drive the TPE sampler; the first hyperparameter trial
//! re-evaluates the step-1 winner at its defaults, so the returned
//! configuration never scores below the combination phase.

pub mod tpe;
pub mod trials;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::peft::methods::{self, HyperKind};
use crate::peft::{Method, PeftSpec};
use tpe::{tpe_suggest, Assignment, DimKind, ParamValue, SearchSpace, TpeConfig};
use trials::{append_trial, create_log, load_trials, TrialRecord, TrialStatus};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search space is empty")]
    EmptySpace,
    #[error("duplicate dimension `{0}`")]
    DuplicateDim(String),
    #[error("bad range for dimension `{0}`")]
    BadRange(String),
    #[error("categorical dimension `{0}` has no values")]
    EmptyCategorical(String),
    #[error("bad search config: {0}")]
    BadConfig(String),
    #[error("trial log line {line}: {msg}")]
    Log { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trial log belongs to a different search space (log {found}, current {expected})")]
    SpaceHashMismatch { found: String, expected: String },
}

/// Result of evaluating one trial.
#[derive(Clone, Debug)]
pub enum TrialOutcome {
    Objective(f64),
    /// Numerical aborts and config rejections land here; the trial is
    /// recorded with a sentinel instead of crashing the search.
    Failed(String),
}

/// Outcome of one TPE loop: the full history plus the best ok trial
/// (ties keep the earlier incumbent).
#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    pub best: Option<TrialRecord>,
    pub records: Vec<TrialRecord>,
}

fn best_of(records: Vec<TrialRecord>) -> StepOutcome {
    let mut best: Option<TrialRecord> = None;
    for r in &records {
        if let Some(o) = r.objective {
            let improves = match &best {
                Some(b) => o > b.objective.unwrap_or(f64::NEG_INFINITY),
                None => true,
            };
            if improves {
                best = Some(r.clone());
            }
        }
    }
    StepOutcome { best, records }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Each trial samples from its own derived RNG so interrupted runs replay
/// bit-exactly from the persisted history.
fn trial_rng(seed: u64, step: u8, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        splitmix64(seed ^ ((step as u64) << 48)) ^ index as u64,
    ))
}

/// Runs one TPE loop. Suggestions are made serially; evaluations may run in
/// waves of `workers` threads (bit-determinism is only promised at
/// `workers == 1`). `existing` records (from a resumed log) are reused
/// without re-evaluation.
#[allow(clippy::too_many_arguments)]
pub fn run_tpe_loop<E>(
    step: u8,
    space: &SearchSpace,
    n_trials: usize,
    tpe_cfg: &TpeConfig,
    sample_seed: u64,
    eval_seed: u64,
    default_first: Option<Assignment>,
    existing: Vec<TrialRecord>,
    workers: usize,
    evaluate: &E,
    log_path: Option<&Path>,
) -> Result<StepOutcome, SearchError>
where
    E: Fn(&Assignment) -> TrialOutcome + Sync,
{
    let mut records = existing;
    while records.len() < n_trials {
        let wave = workers.max(1).min(n_trials - records.len());
        let mut pending = Vec::with_capacity(wave);
        for w in 0..wave {
            let index = records.len() + w;
            let assignment = match (&default_first, index) {
                (Some(d), 0) => d.clone(),
                _ => {
                    let mut rng = trial_rng(sample_seed, step, index);
                    tpe_suggest(space, &records, tpe_cfg, &mut rng)?
                }
            };
            pending.push((index, assignment));
        }
        let outcomes: Vec<TrialOutcome> = if pending.len() == 1 {
            vec![evaluate(&pending[0].1)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = pending
                    .iter()
                    .map(|(_, a)| scope.spawn(move || evaluate(a)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("trial worker panicked"))
                    .collect()
            })
        };
        for ((index, assignment), outcome) in pending.into_iter().zip(outcomes) {
            let (objective, status) = match outcome {
                TrialOutcome::Objective(v) if v.is_finite() => (Some(v), TrialStatus::Ok),
                _ => (None, TrialStatus::Failed),
            };
            let record = TrialRecord {
                trial: index,
                step,
                params: assignment,
                objective,
                status,
                seed: eval_seed,
            };
            if let Some(p) = log_path {
                append_trial(p, &record)?;
            }
            records.push(record);
        }
    }
    Ok(best_of(records))
}

/// The 20 boolean dimensions of the combination phase.
pub fn combination_space() -> SearchSpace {
    let mut space = SearchSpace::new();
    for v in &methods::ALL {
        space = space.add(v.key, DimKind::Boolean).expect("static keys are unique");
    }
    space
}

/// Per-method hyperparameter dimensions for the chosen combination plus the
/// categorical removal dimension.
pub fn step2_space(combination: &[String]) -> Result<SearchSpace, SearchError> {
    let mut space = SearchSpace::new();
    for key in combination {
        let variant = methods::by_key(key)
            .ok_or_else(|| SearchError::BadConfig(format!("unknown method key `{key}`")))?;
        for h in variant.step2 {
            let kind = match h.kind {
                HyperKind::Int(lo, hi) => DimKind::IntUniform { lo, hi },
                HyperKind::Log(lo, hi) => DimKind::LogUniform { lo, hi },
            };
            space = space.add(&format!("{key}.{}", h.field), kind)?;
        }
    }
    let mut removal: Vec<String> = combination.to_vec();
    removal.push("not_remove".into());
    space.add("remove", DimKind::Categorical { values: removal })
}

/// Training-recipe values the step-2 defaults trial pins into the specs so
/// it reproduces the step-1 winner exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDefaults {
    pub lr: f64,
    pub wd_additive: f64,
    pub wd_partial: f64,
}

impl Default for StepDefaults {
    fn default() -> Self {
        StepDefaults {
            lr: 1e-3,
            wd_additive: 1e-4,
            wd_partial: crate::peft::DEFAULT_ANCHOR_DECAY,
        }
    }
}

/// Method keys enabled in a combination assignment, in catalog order.
pub fn enabled_keys(assignment: &Assignment) -> Vec<String> {
    methods::ALL
        .iter()
        .filter(|v| {
            assignment
                .get(v.key)
                .and_then(ParamValue::as_bool)
                .unwrap_or(false)
        })
        .map(|v| v.key.to_string())
        .collect()
}

/// Specs for a method combination at the fixed parameter-minimal settings.
pub fn specs_for_combination(keys: &[String], use_projection: bool) -> Vec<PeftSpec> {
    methods::ALL
        .iter()
        .filter(|v| keys.iter().any(|k| k == v.key))
        .map(|v| v.default_spec(use_projection))
        .collect()
}

/// The step-2 defaults assignment: every hyperparameter at its fixed value
/// and `remove = not_remove`.
pub fn default_assignment(
    combination: &[String],
    defaults: &StepDefaults,
    use_projection: bool,
) -> Assignment {
    let mut out = Assignment::new();
    for key in combination {
        let variant = methods::by_key(key).expect("combination keys are validated");
        let spec = variant.default_spec(use_projection);
        for h in variant.step2 {
            let value = match h.field {
                "r" => ParamValue::Int(spec.r.unwrap_or(8) as i64),
                "s" => ParamValue::Float(spec.s.unwrap_or(0.1)),
                "n" => ParamValue::Int(spec.n.unwrap_or(1) as i64),
                "n_prime" => ParamValue::Int(spec.n_prime.unwrap_or(1) as i64),
                "lr" => ParamValue::Float(defaults.lr),
                "wd" => ParamValue::Float(if spec.method == Method::PartialTuning {
                    defaults.wd_partial
                } else {
                    defaults.wd_additive
                }),
                other => unreachable!("unknown hyper field {other}"),
            };
            out.insert(format!("{key}.{}", h.field), value);
        }
    }
    out.insert("remove".into(), ParamValue::Cat("not_remove".into()));
    out
}

/// Builds the spec list for one step-2 assignment: the combination minus the
/// sampled removal, each method configured from its sampled hyperparameters.
/// Hyperparameters of a removed method are ignored.
pub fn specs_for_step2(
    combination: &[String],
    assignment: &Assignment,
    use_projection: bool,
) -> Vec<PeftSpec> {
    let removal = assignment
        .get("remove")
        .and_then(|v| v.as_str())
        .unwrap_or("not_remove");
    assert!(
        removal == "not_remove" || combination.iter().any(|k| k == removal),
        "space construction bug: removal target `{removal}` not in combination"
    );
    let mut specs = Vec::new();
    for variant in &methods::ALL {
        if !combination.iter().any(|k| k == variant.key) || variant.key == removal {
            continue;
        }
        let mut spec = variant.default_spec(use_projection);
        for h in variant.step2 {
            let value = assignment
                .get(&format!("{}.{}", variant.key, h.field))
                .and_then(ParamValue::as_f64)
                .expect("space covers every hyper dim");
            methods::set_hyper(&mut spec, h.field, value);
        }
        specs.push(spec);
    }
    specs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub n1: usize,
    pub n2: usize,
    #[serde(default)]
    pub tpe: TpeConfig,
    /// Seed driving the samplers.
    pub seed: u64,
    /// Seed the objective evaluations run under (recorded per trial).
    pub eval_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_true")]
    pub use_projection: bool,
    #[serde(default)]
    pub defaults: StepDefaults,
}

fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug)]
pub struct HybridReport {
    pub step1: StepOutcome,
    pub step2: StepOutcome,
    /// Step-1 winner keys.
    pub combination: Vec<String>,
    /// Combination after the best step-2 trial's removal choice.
    pub final_combination: Vec<String>,
    pub final_assignment: Option<Assignment>,
    pub final_objective: Option<f64>,
    pub final_specs: Vec<PeftSpec>,
    /// True when every trial failed; the report then falls back to the
    /// defaults configuration rather than a failed assignment.
    pub all_failed: bool,
}

/// Stable digest of the search space and budget, stored in the trial log so
/// resuming against a different search is rejected.
pub fn space_hash(cfg: &HybridConfig) -> String {
    #[derive(Serialize)]
    struct Hashed<'a> {
        space: SearchSpace,
        tpe: &'a TpeConfig,
        n1: usize,
        n2: usize,
        seed: u64,
        use_projection: bool,
    }
    let doc = serde_json::to_string(&Hashed {
        space: combination_space(),
        tpe: &cfg.tpe,
        n1: cfg.n1,
        n2: cfg.n2,
        seed: cfg.seed,
        use_projection: cfg.use_projection,
    })
    .expect("hash doc serializes");
    let digest = Sha256::digest(doc.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Executes step 1 then step 2, persisting every trial when a log path is
/// given; an interrupted run resumes from the persisted trials and replays
/// to the identical result at `workers == 1`. The step-2 defaults trial runs
/// even with `n2 == 0`, so a zero-budget search still reports the defaults
/// evaluation.
pub fn run_hybrid_search<E>(
    cfg: &HybridConfig,
    evaluate: E,
    log_path: Option<&Path>,
) -> Result<HybridReport, SearchError>
where
    E: Fn(&[PeftSpec]) -> TrialOutcome + Sync,
{
    cfg.tpe.validate()?;
    let hash = space_hash(cfg);
    let mut existing1 = Vec::new();
    let mut existing2 = Vec::new();
    if let Some(path) = log_path {
        match load_trials(path)? {
            Some(log) => {
                if log.space_hash != hash {
                    return Err(SearchError::SpaceHashMismatch {
                        found: log.space_hash,
                        expected: hash,
                    });
                }
                for r in log.records {
                    if r.step == 1 {
                        existing1.push(r);
                    } else {
                        existing2.push(r);
                    }
                }
                if !existing2.is_empty() && existing1.len() < cfg.n1 {
                    return Err(SearchError::Log {
                        line: 0,
                        msg: "log holds step-2 trials but step 1 is incomplete".into(),
                    });
                }
            }
            None => create_log(path, &hash)?,
        }
    }

    let space1 = combination_space();
    let eval1 = |a: &Assignment| {
        let keys = enabled_keys(a);
        evaluate(&specs_for_combination(&keys, cfg.use_projection))
    };
    let step1 = run_tpe_loop(
        1,
        &space1,
        cfg.n1,
        &cfg.tpe,
        cfg.seed,
        cfg.eval_seed,
        None,
        existing1,
        cfg.workers,
        &eval1,
        log_path,
    )?;
    let combination = match &step1.best {
        Some(rec) => enabled_keys(&rec.params),
        None => Vec::new(),
    };

    let space2 = step2_space(&combination)?;
    let defaults = default_assignment(&combination, &cfg.defaults, cfg.use_projection);
    let eval2 = |a: &Assignment| {
        evaluate(&specs_for_step2(&combination, a, cfg.use_projection))
    };
    let step2 = run_tpe_loop(
        2,
        &space2,
        cfg.n2.max(1),
        &cfg.tpe,
        cfg.seed,
        cfg.eval_seed,
        Some(defaults.clone()),
        existing2,
        cfg.workers,
        &eval2,
        log_path,
    )?;

    let (final_assignment, final_objective, all_failed) = match &step2.best {
        Some(rec) => (Some(rec.params.clone()), rec.objective, false),
        None => (None, None, true),
    };
    let chosen = final_assignment.clone().unwrap_or(defaults);
    let removal = chosen
        .get("remove")
        .and_then(|v| v.as_str())
        .unwrap_or("not_remove")
        .to_string();
    let final_combination: Vec<String> = combination
        .iter()
        .filter(|k| **k != removal)
        .cloned()
        .collect();
    let final_specs = specs_for_step2(&combination, &chosen, cfg.use_projection);
    Ok(HybridReport {
        step1,
        step2,
        combination,
        final_combination,
        final_assignment,
        final_objective,
        final_specs,
        all_failed,
    })
}
