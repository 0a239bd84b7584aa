//! The PEFT catalog: 5 LoRA placements, 5 partial LoRAs, ParallelAdapter,
//! Prompt-tuning, Affix-tuning, Additional-scan, and 6 partial-tuning
//! targets, applied as declarative specs on top of a frozen store. Applying
//! then removing a spec restores forward behavior bit-identically; every
//! adapter with a zero-initialized output side starts at the pretrained
//! function.

pub mod hooks;
pub mod methods;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mamba::{paths, MambaConfig, ModelError, ParamStore};
use crate::tensor::{Tensor, TensorError};
use hooks::{
    AffixHook, AffixPlacement, AffixPosition, AffixTokens, HookSet, LoraPatch,
    ParallelAdapterHook, PromptHook, PromptPlacement, ScanEnd, ScanExtensionHook,
};

#[derive(Debug, Error)]
pub enum PeftError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown {what} `{got}`; valid: {valid}")]
    UnknownName {
        what: &'static str,
        got: String,
        valid: &'static str,
    },
    #[error("{method}: {field} must be >= 1")]
    NonPositive {
        method: &'static str,
        field: &'static str,
    },
    #[error("target `{0}` is not present in this model")]
    TargetAbsent(String),
    #[error("invalid placement for {method}: {got:?}")]
    BadPlacement { method: &'static str, got: Placement },
    #[error("{0} cannot be merged into base weights")]
    NotMergeable(String),
    #[error("adapter parameter `{path}` exists with shape {found:?}, expected {expected:?}")]
    AttachShape {
        path: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, PeftError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    PartialLora,
    ParallelAdapter,
    PromptTuning,
    AffixTuning,
    AdditionalScan,
    PartialTuning,
}

impl Method {
    pub fn key(&self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::PartialLora => "partial_lora",
            Method::ParallelAdapter => "parallel_adapter",
            Method::PromptTuning => "prompt_tuning",
            Method::AffixTuning => "affix_tuning",
            Method::AdditionalScan => "additional_scan",
            Method::PartialTuning => "partial_tuning",
        }
    }
}

/// Placement values across all token/extension methods. Which subset is
/// legal depends on the method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Prefix,
    Infix,
    Suffix,
    #[serde(rename = "prefix+suffix")]
    PrefixSuffix,
    BeforeInproj,
    AfterInproj,
    Top,
    Bottom,
}

/// Initialization of the decay-rate extension in Additional-scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanInit {
    S4d,
    Constant(f64),
    /// Copy the adjacent pretrained column (the last one when extending at
    /// the bottom, the first when extending at the top).
    Neighbor,
}

/// Declarative description of one PEFT method instance. Only the fields
/// relevant to `method` are read; the rest are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftSpec {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_prime: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    /// Affix-tuning only: where the tokens enter the block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Placement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<ScanInit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_projection: Option<bool>,
    /// Per-method learning-rate override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Per-method weight-decay override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wd: Option<f64>,
}

impl PeftSpec {
    fn bare(method: Method) -> Self {
        PeftSpec {
            method,
            target: None,
            r: None,
            s: None,
            n: None,
            n_prime: None,
            placement: None,
            position: None,
            init: None,
            use_projection: None,
            lr: None,
            wd: None,
        }
    }

    pub fn lora(target: &str, r: usize, s: f64) -> Self {
        PeftSpec {
            target: Some(target.to_string()),
            r: Some(r),
            s: Some(s),
            ..Self::bare(Method::Lora)
        }
    }

    pub fn partial_lora(slice: &str, r: usize, s: f64) -> Self {
        PeftSpec {
            target: Some(slice.to_string()),
            r: Some(r),
            s: Some(s),
            ..Self::bare(Method::PartialLora)
        }
    }

    pub fn parallel_adapter(r: usize, s: f64) -> Self {
        PeftSpec {
            r: Some(r),
            s: Some(s),
            ..Self::bare(Method::ParallelAdapter)
        }
    }

    pub fn prompt_tuning(n: usize, placement: Placement) -> Self {
        PeftSpec {
            n: Some(n),
            placement: Some(placement),
            ..Self::bare(Method::PromptTuning)
        }
    }

    pub fn affix_tuning(
        n: usize,
        position: Placement,
        placement: Placement,
        use_projection: bool,
    ) -> Self {
        PeftSpec {
            n: Some(n),
            position: Some(position),
            placement: Some(placement),
            use_projection: Some(use_projection),
            ..Self::bare(Method::AffixTuning)
        }
    }

    pub fn additional_scan(n_prime: usize, end: Placement, init: ScanInit) -> Self {
        PeftSpec {
            n_prime: Some(n_prime),
            placement: Some(end),
            init: Some(init),
            ..Self::bare(Method::AdditionalScan)
        }
    }

    pub fn partial_tuning(target: &str) -> Self {
        PeftSpec {
            target: Some(target.to_string()),
            ..Self::bare(Method::PartialTuning)
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = Some(lr);
        self
    }

    pub fn with_wd(mut self, wd: f64) -> Self {
        self.wd = Some(wd);
        self
    }

    /// Table-style label, e.g. `LoRA(in_proj)`, `LoRA_p(X)`, `A-tuning`.
    pub fn label(&self) -> String {
        let target = self.target.as_deref().unwrap_or("");
        match self.method {
            Method::Lora => format!("LoRA({target})"),
            Method::PartialLora => format!("LoRA_p({})", target.to_uppercase()),
            Method::ParallelAdapter => "ParallelAdapter".into(),
            Method::PromptTuning => "Prompt-tuning".into(),
            Method::AffixTuning => {
                if self.use_projection.unwrap_or(true) {
                    "Affix-tuning".into()
                } else {
                    "Affix-tuning (w/o proj)".into()
                }
            }
            Method::AdditionalScan => "Additional-scan".into(),
            Method::PartialTuning => match target {
                "bias" => "Bias-tuning".into(),
                "a" => "A-tuning".into(),
                "d" => "D-tuning".into(),
                "conv1d" => "Conv1d-tuning".into(),
                "cls_token" => "CLS-token-tuning".into(),
                "pos_embed" => "Pos-embed-tuning".into(),
                other => format!("Partial-tuning({other})"),
            },
        }
    }

    /// Closed-form trainable-parameter count for this spec on `cfg`.
    pub fn param_count(&self, cfg: &MambaConfig) -> Result<usize> {
        let d = cfg.d_model;
        let di = cfg.d_inner();
        let n_state = cfg.d_state;
        let layers = cfg.n_layers;
        Ok(match self.method {
            Method::Lora => {
                let (d_in, d_out) = lora_target_dims(cfg, self.target.as_deref().unwrap_or(""))?;
                self.r.unwrap_or(DEFAULT_R) * (d_in + d_out)
            }
            Method::PartialLora => {
                let slice = partial_slice(cfg, self.target.as_deref().unwrap_or(""))?;
                self.r.unwrap_or(DEFAULT_R) * (slice.d_in + slice.len)
            }
            Method::ParallelAdapter => self.r.unwrap_or(DEFAULT_R) * (di + d),
            Method::PromptTuning => self.n.unwrap_or(1) * d,
            Method::AffixTuning => {
                let n = self.n.unwrap_or(1);
                let width = affix_width(cfg, self.resolved_affix_position()?);
                if self.use_projection.unwrap_or(true) {
                    n * d + layers * d * width
                } else {
                    layers * n * width
                }
            }
            Method::AdditionalScan => {
                let np = self.n_prime.unwrap_or(1);
                layers * (di * np + di * 2 * np)
            }
            Method::PartialTuning => match self.target.as_deref().unwrap_or("") {
                "bias" => layers * 2 * di,
                "a" => layers * di * n_state,
                "d" => layers * di,
                "conv1d" => layers * (cfg.d_conv * di + di),
                "cls_token" => d,
                "pos_embed" => cfg.max_seq_len * d,
                other => {
                    return Err(PeftError::UnknownName {
                        what: "partial-tuning target",
                        got: other.to_string(),
                        valid: PARTIAL_TARGETS,
                    })
                }
            },
        })
    }

    fn resolved_affix_position(&self) -> Result<AffixPosition> {
        match self.position.unwrap_or(Placement::AfterInproj) {
            Placement::BeforeInproj => Ok(AffixPosition::BeforeInproj),
            Placement::AfterInproj => Ok(AffixPosition::AfterInproj),
            other => Err(PeftError::BadPlacement {
                method: "affix_tuning",
                got: other,
            }),
        }
    }
}

const DEFAULT_R: usize = 8;
const DEFAULT_SCALE: f64 = 0.1;
pub const DEFAULT_ANCHOR_DECAY: f64 = 1e-3;

const LORA_TARGETS: &str = "embedding, in_proj, x_proj, dt_proj, out_proj";
const PARTIAL_LORA_SLICES: &str = "x, z, dt, b, c";
const PARTIAL_TARGETS: &str = "bias, a, d, conv1d, cls_token, pos_embed";

fn lora_target_dims(cfg: &MambaConfig, target: &str) -> Result<(usize, usize)> {
    let di = cfg.d_inner();
    Ok(match target {
        "embedding" => (cfg.vocab_size, cfg.d_model),
        "in_proj" => (cfg.d_model, 2 * di),
        "x_proj" => (di, cfg.x_proj_out()),
        "dt_proj" => (cfg.dt_rank, di),
        "out_proj" => (di, cfg.d_model),
        other => {
            return Err(PeftError::UnknownName {
                what: "lora target",
                got: other.to_string(),
                valid: LORA_TARGETS,
            })
        }
    })
}

struct PartialSlice {
    site: &'static str,
    d_in: usize,
    start: usize,
    len: usize,
}

fn partial_slice(cfg: &MambaConfig, slice: &str) -> Result<PartialSlice> {
    let di = cfg.d_inner();
    Ok(match slice {
        "x" => PartialSlice {
            site: "in_proj",
            d_in: cfg.d_model,
            start: 0,
            len: di,
        },
        "z" => PartialSlice {
            site: "in_proj",
            d_in: cfg.d_model,
            start: di,
            len: di,
        },
        "dt" => PartialSlice {
            site: "x_proj",
            d_in: di,
            start: 0,
            len: cfg.dt_rank,
        },
        "b" => PartialSlice {
            site: "x_proj",
            d_in: di,
            start: cfg.dt_rank,
            len: cfg.d_state,
        },
        "c" => PartialSlice {
            site: "x_proj",
            d_in: di,
            start: cfg.dt_rank + cfg.d_state,
            len: cfg.d_state,
        },
        other => {
            return Err(PeftError::UnknownName {
                what: "partial-lora slice",
                got: other.to_string(),
                valid: PARTIAL_LORA_SLICES,
            })
        }
    })
}

fn affix_width(cfg: &MambaConfig, position: AffixPosition) -> usize {
    match position {
        // Tokens enter the fused in_proj output so both the scan stream and
        // the gate stream stay aligned.
        AffixPosition::AfterInproj => 2 * cfg.d_inner(),
        AffixPosition::BeforeInproj => cfg.d_model,
    }
}

/// How the optimizer should treat one parameter path.
#[derive(Clone, Copy, Debug, Default)]
pub struct PathPolicy {
    pub lr: Option<f64>,
    pub wd: Option<f64>,
    /// Decay toward the pretrained snapshot instead of toward zero.
    pub anchored: bool,
}

#[derive(Clone, Debug)]
enum AppliedKind {
    Lora { site: String, patch: LoraPatch },
    Parallel(ParallelAdapterHook),
    Prompt(PromptHook),
    Affix(AffixHook),
    Scan(ScanExtensionHook),
    Partial { flipped: Vec<String> },
}

/// One applied spec: the trainable tensors it registered (or flipped) and the
/// compiled hook it contributes to the forward pass.
#[derive(Clone, Debug)]
pub struct AppliedAdapter {
    pub spec: PeftSpec,
    /// Store paths created by this adapter (empty for partial tuning).
    pub param_paths: Vec<String>,
    kind: AppliedKind,
}

impl AppliedAdapter {
    /// Trainable paths owned by this adapter (created or flipped).
    pub fn trainable_paths(&self) -> Vec<String> {
        match &self.kind {
            AppliedKind::Partial { flipped } => flipped.clone(),
            _ => self.param_paths.clone(),
        }
    }

    /// Element count actually registered/flipped by this adapter.
    pub fn enumerated_count(&self, store: &ParamStore) -> usize {
        self.trainable_paths()
            .iter()
            .map(|p| store.get(p).map(|t| t.numel()).unwrap_or(0))
            .sum()
    }

    pub fn mergeable(&self) -> bool {
        match &self.kind {
            AppliedKind::Lora { .. } => true,
            AppliedKind::Affix(hook) => matches!(hook.tokens, AffixTokens::Projected { .. }),
            _ => false,
        }
    }
}

/// Ordered set of applied adapters over one store. Two specs targeting the
/// same linear stack additively in application order.
#[derive(Clone, Debug, Default)]
pub struct AdapterSet {
    adapters: Vec<AppliedAdapter>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn adapters(&self) -> &[AppliedAdapter] {
        &self.adapters
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Freezes every base path, applies the specs in order, and returns the
    /// set. Adapter initialization is deterministic in `seed`.
    pub fn apply_all(
        store: &mut ParamStore,
        cfg: &MambaConfig,
        specs: &[PeftSpec],
        seed: u64,
    ) -> Result<AdapterSet> {
        Self::build(store, cfg, specs, seed, false)
    }

    /// Like `apply_all` but reuses adapter tensors already present in the
    /// store (e.g. loaded from a fine-tuned checkpoint) instead of
    /// reinitializing them.
    pub fn attach_all(
        store: &mut ParamStore,
        cfg: &MambaConfig,
        specs: &[PeftSpec],
        seed: u64,
    ) -> Result<AdapterSet> {
        Self::build(store, cfg, specs, seed, true)
    }

    fn build(
        store: &mut ParamStore,
        cfg: &MambaConfig,
        specs: &[PeftSpec],
        seed: u64,
        reuse: bool,
    ) -> Result<AdapterSet> {
        use rand::SeedableRng;
        store.freeze_all();
        let mut set = AdapterSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for spec in specs {
            set.apply(store, cfg, spec, &mut rng, reuse)?;
        }
        Ok(set)
    }

    /// Applies one spec. `reuse` keeps existing adapter tensors when their
    /// shapes match instead of reinitializing.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        cfg: &MambaConfig,
        spec: &PeftSpec,
        rng: &mut rand_chacha::ChaCha8Rng,
        reuse: bool,
    ) -> Result<()> {
        let ordinal = self.adapters.len();
        let mut reg = Registrar {
            store,
            reuse,
            created: Vec::new(),
        };
        let kind = match spec.method {
            Method::Lora => apply_lora(cfg, spec, ordinal, &mut reg, rng)?,
            Method::PartialLora => apply_partial_lora(cfg, spec, ordinal, &mut reg, rng)?,
            Method::ParallelAdapter => apply_parallel_adapter(cfg, spec, ordinal, &mut reg, rng)?,
            Method::PromptTuning => apply_prompt_tuning(cfg, spec, ordinal, &mut reg)?,
            Method::AffixTuning => apply_affix_tuning(cfg, spec, ordinal, &mut reg, rng)?,
            Method::AdditionalScan => extend_additional_scan(cfg, spec, ordinal, &mut reg, rng)?,
            Method::PartialTuning => set_partial_tuning(cfg, spec, reg.store)?,
        };
        let param_paths = reg.created;
        self.adapters.push(AppliedAdapter {
            spec: spec.clone(),
            param_paths,
            kind,
        });
        Ok(())
    }

    /// Removes the adapter at `index`, deleting its parameters and restoring
    /// trainable flags; forward behavior returns to what it was before the
    /// adapter was applied.
    pub fn remove(&mut self, store: &mut ParamStore, index: usize) -> Result<()> {
        let adapter = self.adapters.remove(index);
        for path in &adapter.param_paths {
            store.remove(path)?;
        }
        if matches!(adapter.kind, AppliedKind::Partial { .. }) {
            self.reflip_partials(store)?;
        }
        Ok(())
    }

    // Overlapping partial-tuning specs can share paths (e.g. bias and
    // conv1d both cover the conv bias), so removal recomputes flags from
    // scratch over the survivors.
    fn reflip_partials(&self, store: &mut ParamStore) -> Result<()> {
        let mut keep: Vec<String> = Vec::new();
        for a in &self.adapters {
            if let AppliedKind::Partial { flipped } = &a.kind {
                keep.extend(flipped.iter().cloned());
            }
        }
        for path in store.pretrained_paths().cloned().collect::<Vec<_>>() {
            store.set_trainable(&path, false)?;
        }
        for path in keep {
            store.set_trainable(&path, true)?;
        }
        Ok(())
    }

    /// Compiled hooks for the forward pass, in application order.
    pub fn hook_set(&self) -> HookSet {
        let mut hooks = HookSet::default();
        for a in &self.adapters {
            match &a.kind {
                AppliedKind::Lora { site, patch } => hooks.push_lora(site, patch.clone()),
                AppliedKind::Parallel(h) => hooks.parallel.push(h.clone()),
                AppliedKind::Prompt(h) => hooks.prompt.push(h.clone()),
                AppliedKind::Affix(h) => hooks.affix.push(h.clone()),
                AppliedKind::Scan(h) => hooks.scan_ext.push(h.clone()),
                AppliedKind::Partial { .. } => {}
            }
        }
        hooks
    }

    /// Per-path optimizer policies from the specs' lr/wd overrides. Partial
    /// tuning anchors decay to the pretrained snapshot.
    pub fn optimizer_policies(&self) -> BTreeMap<String, PathPolicy> {
        let mut map = BTreeMap::new();
        for a in &self.adapters {
            let anchored = matches!(a.kind, AppliedKind::Partial { .. });
            let wd = if anchored {
                Some(a.spec.wd.unwrap_or(DEFAULT_ANCHOR_DECAY))
            } else {
                a.spec.wd
            };
            for path in a.trainable_paths() {
                map.insert(
                    path,
                    PathPolicy {
                        lr: a.spec.lr,
                        wd,
                        anchored,
                    },
                );
            }
        }
        map
    }

    /// Folds the adapter at `index` into the base weights and drops its
    /// parameters. Errors when the adapter has a nonlinearity or no
    /// projection to fold.
    pub fn merge(&mut self, store: &mut ParamStore, cfg: &MambaConfig, index: usize) -> Result<()> {
        if !self.adapters[index].mergeable() {
            return Err(PeftError::NotMergeable(self.adapters[index].spec.label()));
        }
        let adapter = self.adapters[index].clone();
        match &adapter.kind {
            AppliedKind::Lora { site, patch } => {
                let down = store.expect(&patch.down)?.clone();
                let up = store.expect(&patch.up)?.clone();
                let delta = mat_mul_scaled(&down, &up, patch.scale)?;
                let weight_paths: Vec<String> = if site == "embedding" {
                    vec![paths::EMBEDDING.to_string()]
                } else {
                    (0..cfg.n_layers)
                        .map(|i| match site.as_str() {
                            "in_proj" => paths::in_proj(i),
                            "x_proj" => paths::x_proj(i),
                            "dt_proj" => paths::dt_proj_weight(i),
                            "out_proj" => paths::out_proj(i),
                            _ => unreachable!("validated at apply time"),
                        })
                        .collect()
                };
                for wp in weight_paths {
                    let mut w = store.expect(&wp)?.clone();
                    add_into_columns(&mut w, &delta, patch.cols)?;
                    store.set_data(&wp, w)?;
                }
                for p in &adapter.param_paths {
                    store.remove(p)?;
                }
                self.adapters.remove(index);
            }
            AppliedKind::Affix(hook) => {
                let AffixTokens::Projected {
                    shared,
                    projections,
                } = &hook.tokens
                else {
                    return Err(PeftError::NotMergeable(adapter.spec.label()));
                };
                let shared_t = store.expect(shared)?.clone();
                let mut token_paths = Vec::new();
                for (i, proj) in projections.iter().enumerate() {
                    let p = store.expect(proj)?.clone();
                    let tokens = mat_mul_scaled(&shared_t, &p, 1.0)?;
                    let path = format!("{}.layers.{i}.tokens", adapter_prefix(&adapter.spec, index));
                    store.insert(&path, tokens, true);
                    token_paths.push(path);
                }
                for p in &adapter.param_paths {
                    store.remove(p)?;
                }
                let slot = &mut self.adapters[index];
                slot.spec.use_projection = Some(false);
                slot.param_paths = token_paths.clone();
                slot.kind = AppliedKind::Affix(AffixHook {
                    tokens: AffixTokens::PerLayer(token_paths),
                    ..hook.clone()
                });
            }
            _ => unreachable!("mergeable() gated above"),
        }
        Ok(())
    }

    /// Merges every mergeable adapter; returns how many were folded.
    pub fn merge_mergeable(&mut self, store: &mut ParamStore, cfg: &MambaConfig) -> Result<usize> {
        let mut merged = 0;
        let mut i = 0;
        while i < self.adapters.len() {
            if self.adapters[i].mergeable() {
                // A merged affix stays in place (now projection-free); LoRA
                // adapters vanish and the next element shifts in.
                let stays = matches!(self.adapters[i].kind, AppliedKind::Affix(_));
                self.merge(store, cfg, i)?;
                merged += 1;
                if stays {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        Ok(merged)
    }
}

/// Sum of element counts over trainable paths (the `#Params` accounting).
pub fn count_trainable_params(store: &ParamStore) -> usize {
    store.count_trainable()
}

/// Gradient of the anchored decay term `lambda * |W - W_pre|^2`, i.e.
/// `2 * lambda * (W - W_pre)`.
pub fn anchored_weight_decay_grad(w: &Tensor, w_pre: &Tensor, lambda: f64) -> Result<Tensor> {
    if w.shape() != w_pre.shape() {
        return Err(PeftError::Tensor(TensorError::ShapeMismatch {
            op: "anchored_weight_decay_grad",
            lhs: w.shape().to_vec(),
            rhs: w_pre.shape().to_vec(),
        }));
    }
    let data = w
        .data()
        .iter()
        .zip(w_pre.data())
        .map(|(a, b)| 2.0 * lambda * (a - b))
        .collect();
    Ok(Tensor::new(w.shape().to_vec(), data)?)
}

fn adapter_prefix(spec: &PeftSpec, ordinal: usize) -> String {
    match &spec.target {
        Some(t) => format!("peft.{}.{t}.{ordinal}", spec.method.key()),
        None => format!("peft.{}.{ordinal}", spec.method.key()),
    }
}

/// Registers adapter tensors, honoring attach-mode reuse.
struct Registrar<'a> {
    store: &'a mut ParamStore,
    reuse: bool,
    created: Vec<String>,
}

impl Registrar<'_> {
    fn register(&mut self, path: String, init: impl FnOnce() -> Tensor, shape: &[usize]) -> Result<()> {
        if self.reuse {
            if let Some(existing) = self.store.get(&path) {
                if existing.shape() != shape {
                    return Err(PeftError::AttachShape {
                        path,
                        found: existing.shape().to_vec(),
                        expected: shape.to_vec(),
                    });
                }
                self.store.set_trainable(&path, true)?;
                self.created.push(path);
                return Ok(());
            }
        }
        let t = init();
        debug_assert_eq!(t.shape(), shape);
        self.store.insert(&path, t, true);
        self.created.push(path);
        Ok(())
    }
}

fn require_at_least_one(
    value: usize,
    method: &'static str,
    field: &'static str,
) -> Result<usize> {
    if value == 0 {
        Err(PeftError::NonPositive { method, field })
    } else {
        Ok(value)
    }
}

fn down_init<R: Rng>(d_in: usize, r: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (d_in as f64).sqrt();
    Tensor::rand_uniform(vec![d_in, r], -bound, bound, rng)
}

fn apply_lora<R: Rng>(
    cfg: &MambaConfig,
    spec: &PeftSpec,
    ordinal: usize,
    reg: &mut Registrar,
    rng: &mut R,
) -> Result<AppliedKind> {
    let target = spec.target.clone().unwrap_or_default();
    let (d_in, d_out) = lora_target_dims(cfg, &target)?;
    let r = require_at_least_one(spec.r.unwrap_or(DEFAULT_R), "lora", "r")?;
    let s = spec.s.unwrap_or(DEFAULT_SCALE);
    let prefix = adapter_prefix(spec, ordinal);
    let down = format!("{prefix}.down");
    let up = format!("{prefix}.up");
    reg.register(down.clone(), || down_init(d_in, r, rng), &[d_in, r])?;
    reg.register(up.clone(), || Tensor::zeros(vec![r, d_out]), &[r, d_out])?;
    Ok(AppliedKind::Lora {
        site: target,
        patch: LoraPatch {
            down,
            up,
            scale: s,
            cols: None,
        },
    })
}

fn apply_partial_lora<R: Rng>(
    cfg: &MambaConfig,
    spec: &PeftSpec,
    ordinal: usize,
    reg: &mut Registrar,
    rng: &mut R,
) -> Result<AppliedKind> {
    let slice_name = spec.target.clone().unwrap_or_default();
    let slice = partial_slice(cfg, &slice_name)?;
    let r = require_at_least_one(spec.r.unwrap_or(DEFAULT_R), "partial_lora", "r")?;
    let s = spec.s.unwrap_or(DEFAULT_SCALE);
    let prefix = adapter_prefix(spec, ordinal);
    let down = format!("{prefix}.down");
    let up = format!("{prefix}.up");
    reg.register(down.clone(), || down_init(slice.d_in, r, rng), &[slice.d_in, r])?;
    reg.register(up.clone(), || Tensor::zeros(vec![r, slice.len]), &[r, slice.len])?;
    Ok(AppliedKind::Lora {
        site: slice.site.to_string(),
        patch: LoraPatch {
            down,
            up,
            scale: s,
            cols: Some((slice.start, slice.len)),
        },
    })
}

fn apply_parallel_adapter<R: Rng>(
    cfg: &MambaConfig,
    spec: &PeftSpec,
    ordinal: usize,
    reg: &mut Registrar,
    rng: &mut R,
) -> Result<AppliedKind> {
    let di = cfg.d_inner();
    let r = require_at_least_one(spec.r.unwrap_or(DEFAULT_R), "parallel_adapter", "r")?;
    let s = spec.s.unwrap_or(DEFAULT_SCALE);
    let prefix = adapter_prefix(spec, ordinal);
    let down = format!("{prefix}.down");
    let up = format!("{prefix}.up");
    reg.register(down.clone(), || down_init(di, r, rng), &[di, r])?;
    reg.register(up.clone(), || Tensor::zeros(vec![r, cfg.d_model]), &[r, cfg.d_model])?;
    Ok(AppliedKind::Parallel(ParallelAdapterHook {
        down,
        up,
        scale: s,
    }))
}

fn apply_prompt_tuning(
    cfg: &MambaConfig,
    spec: &PeftSpec,
    ordinal: usize,
    reg: &mut Registrar,
) -> Result<AppliedKind> {
    let n = require_at_least_one(spec.n.unwrap_or(1), "prompt_tuning", "n")?;
    let placement = match spec.placement.unwrap_or(Placement::Prefix) {
        Placement::Prefix => PromptPlacement::Prefix,
        Placement::Infix => PromptPlacement::Infix,
        Placement::Suffix => PromptPlacement::Suffix,
        Placement::PrefixSuffix => PromptPlacement::PrefixSuffix,
        other => {
            return Err(PeftError::BadPlacement {
                method: "prompt_tuning",
                got: other,
            })
        }
    };
    if n >= cfg.max_seq_len {
        return Err(PeftError::Model(ModelError::SequenceTooLong {
            got: n,
            max: cfg.max_seq_len,
        }));
    }
    let prefix = adapter_prefix(spec, ordinal);
    let tokens = format!("{prefix}.tokens");
    reg.register(
        tokens.clone(),
        || Tensor::zeros(vec![n, cfg.d_model]),
        &[n, cfg.d_model],
    )?;
    Ok(AppliedKind::Prompt(PromptHook {
        n,
        placement,
        tokens,
    }))
}

fn apply_affix_tuning<R: Rng>(
    cfg: &MambaConfig,
    spec: &PeftSpec,
    ordinal: usize,
    reg: &mut Registrar,
    rng: &mut R,
) -> Result<AppliedKind> {
    let n = require_at_least_one(spec.n.unwrap_or(1), "affix_tuning", "n")?;
    let position = spec.resolved_affix_position()?;
    let placement = match spec.placement.unwrap_or(Placement::Prefix) {
        Placement::Prefix => AffixPlacement::Prefix,
        Placement::Infix => AffixPlacement::Infix,
        other => {
            return Err(PeftError::BadPlacement {
                method: "affix_tuning",
                got: other,
            })
        }
    };
    let width = affix_width(cfg, position);
    let prefix = adapter_prefix(spec, ordinal);
    let tokens = if spec.use_projection.unwrap_or(true) {
        let shared = format!("{prefix}.shared.tokens");
        reg.register(
            shared.clone(),
            || Tensor::zeros(vec![n, cfg.d_model]),
            &[n, cfg.d_model],
        )?;
        let mut projections = Vec::new();
        for i in 0..cfg.n_layers {
            let p = format!("{prefix}.layers.{i}.proj");
            let bound = 1.0 / (cfg.d_model as f64).sqrt();
            reg.register(
                p.clone(),
                || Tensor::rand_uniform(vec![cfg.d_model, width], -bound, bound, rng),
                &[cfg.d_model, width],
            )?;
            projections.push(p);
        }
        AffixTokens::Projected {
            shared,
            projections,
        }
    } else {
        let mut per_layer = Vec::new();
        for i in 0..cfg.n_layers {
            let p = format!("{prefix}.layers.{i}.tokens");
            reg.register(p.clone(), || Tensor::zeros(vec![n, width]), &[n, width])?;
            per_layer.push(p);
        }
        AffixTokens::PerLayer(per_layer)
    };
    Ok(AppliedKind::Affix(AffixHook {
        n,
        position,
        placement,
        tokens,
    }))
}

fn extend_additional_scan<R: Rng>(
    cfg: &MambaConfig,
    spec: &PeftSpec,
    ordinal: usize,
    reg: &mut Registrar,
    rng: &mut R,
) -> Result<AppliedKind> {
    let np = require_at_least_one(spec.n_prime.unwrap_or(1), "additional_scan", "n_prime")?;
    let end = match spec.placement.unwrap_or(Placement::Top) {
        Placement::Top => ScanEnd::Top,
        Placement::Bottom => ScanEnd::Bottom,
        other => {
            return Err(PeftError::BadPlacement {
                method: "additional_scan",
                got: other,
            })
        }
    };
    let init = spec.init.unwrap_or(ScanInit::Neighbor);
    let di = cfg.d_inner();
    let n_state = cfg.d_state;
    let prefix = adapter_prefix(spec, ordinal);
    let mut a_paths = Vec::new();
    let mut x_paths = Vec::new();
    for i in 0..cfg.n_layers {
        let a_path = format!("{prefix}.layers.{i}.a_ext");
        let base_a = reg.store.expect(&paths::a(i))?.clone();
        let a_init = move || {
            let mut data = vec![0.0; di * np];
            for l in 0..di {
                for j in 0..np {
                    data[l * np + j] = match init {
                        ScanInit::S4d => (n_state + 1 + j) as f64,
                        ScanInit::Constant(c) => c,
                        ScanInit::Neighbor => match end {
                            // Adjacent pretrained column: last for bottom,
                            // first for top.
                            ScanEnd::Bottom => base_a.data()[l * n_state + (n_state - 1)],
                            ScanEnd::Top => base_a.data()[l * n_state],
                        },
                    };
                }
            }
            Tensor::new(vec![di, np], data).expect("sized above")
        };
        reg.register(a_path.clone(), a_init, &[di, np])?;
        a_paths.push(a_path);

        let x_path = format!("{prefix}.layers.{i}.x_proj_ext");
        let bound = 1.0 / (di as f64).sqrt();
        let mut data = vec![0.0; di * 2 * np];
        for row in data.chunks_mut(2 * np) {
            // B extension columns start random so gradients reach the
            // zero-initialized C extension; C columns start at zero so the
            // adapted forward equals the base forward.
            for value in row.iter_mut().take(np) {
                *value = rng.gen_range(-bound..bound);
            }
        }
        reg.register(
            x_path.clone(),
            move || Tensor::new(vec![di, 2 * np], data).expect("sized above"),
            &[di, 2 * np],
        )?;
        x_paths.push(x_path);
    }
    Ok(AppliedKind::Scan(ScanExtensionHook {
        n_prime: np,
        end,
        a_ext: a_paths,
        x_proj_ext: x_paths,
    }))
}

fn set_partial_tuning(
    cfg: &MambaConfig,
    spec: &PeftSpec,
    store: &mut ParamStore,
) -> Result<AppliedKind> {
    let target = spec.target.clone().unwrap_or_default();
    let mut flipped = Vec::new();
    let push = |paths: Vec<String>, flipped: &mut Vec<String>| -> Result<()> {
        for p in paths {
            if !store.contains(&p) {
                return Err(PeftError::TargetAbsent(p));
            }
            flipped.push(p);
        }
        Ok(())
    };
    match target.as_str() {
        "bias" => {
            for i in 0..cfg.n_layers {
                push(vec![paths::dt_proj_bias(i), paths::conv_bias(i)], &mut flipped)?;
            }
        }
        "a" => {
            for i in 0..cfg.n_layers {
                push(vec![paths::a(i)], &mut flipped)?;
            }
        }
        "d" => {
            for i in 0..cfg.n_layers {
                push(vec![paths::d(i)], &mut flipped)?;
            }
        }
        "conv1d" => {
            for i in 0..cfg.n_layers {
                push(vec![paths::conv_weight(i), paths::conv_bias(i)], &mut flipped)?;
            }
        }
        "cls_token" => push(vec![paths::CLS_TOKEN.to_string()], &mut flipped)?,
        "pos_embed" => push(vec![paths::POS_EMBED.to_string()], &mut flipped)?,
        other => {
            return Err(PeftError::UnknownName {
                what: "partial-tuning target",
                got: other.to_string(),
                valid: PARTIAL_TARGETS,
            })
        }
    }
    for p in &flipped {
        store.set_trainable(p, true)?;
    }
    Ok(AppliedKind::Partial { flipped })
}

fn mat_mul_scaled(a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    if b.shape()[0] != k {
        return Err(PeftError::Tensor(TensorError::ShapeMismatch {
            op: "merge",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += scale * aip * b.data()[p * n + j];
            }
        }
    }
    Ok(Tensor::new(vec![m, n], out)?)
}

fn add_into_columns(w: &mut Tensor, delta: &Tensor, cols: Option<(usize, usize)>) -> Result<()> {
    let (rows, w_cols) = (w.shape()[0], w.shape()[1]);
    let (start, len) = cols.unwrap_or((0, w_cols));
    if delta.shape() != vec![rows, len] {
        return Err(PeftError::Tensor(TensorError::ShapeMismatch {
            op: "merge",
            lhs: w.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        }));
    }
    for r in 0..rows {
        for c in 0..len {
            w.data_mut()[r * w_cols + start + c] += delta.data()[r * len + c];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba::{init_store, ClsPosition, Forward};
    use rand::SeedableRng;

    fn tiny_cfg() -> MambaConfig {
        MambaConfig {
            d_model: 4,
            expand: 2,
            d_state: 2,
            dt_rank: 2,
            d_conv: 2,
            n_layers: 2,
            vocab_size: 6,
            n_classes: 3,
            use_cls_token: true,
            cls_position: ClsPosition::Middle,
            use_pos_embed: true,
            max_seq_len: 16,
        }
    }

    fn pretrained_store(cfg: &MambaConfig, seed: u64) -> ParamStore {
        let mut store = init_store(cfg, seed).unwrap();
        store.snapshot_pretrained().unwrap();
        store
    }

    fn logits_of(store: &ParamStore, cfg: &MambaConfig, set: &AdapterSet, batch: &[Vec<usize>]) -> Tensor {
        Forward::new(store, cfg, set.hook_set())
            .logits(batch)
            .unwrap()
            .value()
    }

    fn batch() -> Vec<Vec<usize>> {
        vec![vec![0, 1, 2, 3, 4], vec![5, 4, 3, 2, 1]]
    }

    #[test]
    fn zero_init_adapters_leave_logits_bit_identical() {
        let cfg = tiny_cfg();
        let store = pretrained_store(&cfg, 31);
        let base = logits_of(&store, &cfg, &AdapterSet::new(), &batch());
        let specs = [
            PeftSpec::lora("embedding", 4, 0.5),
            PeftSpec::lora("in_proj", 4, 0.5),
            PeftSpec::partial_lora("x", 3, 0.5),
            PeftSpec::partial_lora("b", 2, 0.5),
            PeftSpec::parallel_adapter(4, 0.5),
            PeftSpec::additional_scan(2, Placement::Top, ScanInit::Neighbor),
            PeftSpec::additional_scan(2, Placement::Bottom, ScanInit::S4d),
        ];
        for spec in specs {
            let mut s = store.clone();
            let set = AdapterSet::apply_all(&mut s, &cfg, &[spec.clone()], 7).unwrap();
            let adapted = logits_of(&s, &cfg, &set, &batch());
            assert!(adapptable_eq(&base, &adapted), "{} broke zero-init start", spec.label());
        }
    }

    fn adapptable_eq(a: &Tensor, b: &Tensor) -> bool {
        a.bit_eq(b)
    }

    #[test]
    fn lora_effective_weight_hand_case() {
        // W=I2, s=1, down=[1,0]^T, up=[0,1] -> W' = [[1,1],[0,1]].
        let cfg = MambaConfig {
            d_model: 2,
            expand: 1,
            d_state: 1,
            dt_rank: 1,
            d_conv: 1,
            n_layers: 1,
            vocab_size: 4,
            n_classes: 2,
            use_cls_token: false,
            cls_position: ClsPosition::Front,
            use_pos_embed: false,
            max_seq_len: 8,
        };
        let mut store = pretrained_store(&cfg, 0);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.set_data(&paths::out_proj(0), eye).unwrap();
        let mut set = AdapterSet::apply_all(
            &mut store,
            &cfg,
            &[PeftSpec::lora("out_proj", 1, 1.0)],
            0,
        )
        .unwrap();
        let down_path = &set.adapters()[0].param_paths[0];
        let up_path = &set.adapters()[0].param_paths[1];
        store
            .set_data(down_path, Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap())
            .unwrap();
        store
            .set_data(up_path, Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        set.merge(&mut store, &cfg, 0).unwrap();
        let w = store.get(&paths::out_proj(0)).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn partial_lora_leaves_other_columns_untouched() {
        let cfg = tiny_cfg();
        let store = pretrained_store(&cfg, 5);
        let mut s = store.clone();
        let set = AdapterSet::apply_all(&mut s, &cfg, &[PeftSpec::partial_lora("b", 2, 1.0)], 3)
            .unwrap();
        // Give the up matrix nonzero values so the B slice actually changes.
        let up_path = set.adapters()[0].param_paths[1].clone();
        let shape = s.get(&up_path).unwrap().shape().to_vec();
        s.set_data(&up_path, Tensor::full(shape, 0.3)).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(vec![3, cfg.d_inner()], -1.0, 1.0, &mut rng);
        let run = |store: &ParamStore, set: &AdapterSet| {
            let fwd = Forward::new(store, &cfg, set.hook_set());
            let xv = fwd.graph().leaf(&x);
            let s6p = fwd.s6_inputs(0).unwrap();
            let out = s6_compute_for_test(&xv, &s6p);
            (out.0, out.1)
        };
        let (b_base, c_base) = run(&store, &AdapterSet::new());
        let (b_adapted, c_adapted) = run(&s, &set);
        assert!(!b_base.bit_eq(&b_adapted), "B slice should move");
        assert!(c_base.bit_eq(&c_adapted), "C slice must be untouched");
    }

    fn s6_compute_for_test(
        x: &crate::tensor::Var,
        p: &crate::mamba::S6Inputs,
    ) -> (Tensor, Tensor) {
        let out = crate::mamba::s6_compute(x, p).unwrap();
        (out.b_bar.value(), out.c.value())
    }

    #[test]
    fn parallel_adapter_hand_case() {
        // h=[1,-1], down=I, up=I, s=0.1 adds [0.1, 0].
        let g = crate::tensor::Graph::new();
        let h = g.leaf(&Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let eye = g.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let add = h
            .matmul(&eye)
            .unwrap()
            .relu()
            .unwrap()
            .matmul(&eye)
            .unwrap()
            .scale(0.1)
            .unwrap();
        assert_eq!(add.value().data(), &[0.1, 0.0]);
    }

    #[test]
    fn prompt_changes_logits_even_at_zero_init() {
        let cfg = tiny_cfg();
        let mut store = init_store(&cfg, 13).unwrap();
        // A trained model has nonzero conv bias; zero prompt rows then pass
        // through the conv nonlinearity and shift the scan.
        for i in 0..cfg.n_layers {
            store
                .set_data(
                    &paths::conv_bias(i),
                    Tensor::full(vec![cfg.d_inner()], 0.2),
                )
                .unwrap();
        }
        store.snapshot_pretrained().unwrap();
        let base = logits_of(&store, &cfg, &AdapterSet::new(), &batch());
        let mut s = store.clone();
        let set = AdapterSet::apply_all(
            &mut s,
            &cfg,
            &[PeftSpec::prompt_tuning(2, Placement::PrefixSuffix)],
            0,
        )
        .unwrap();
        let adapted = logits_of(&s, &cfg, &set, &batch());
        assert!(!base.bit_eq(&adapted));
    }

    #[test]
    fn affix_preserves_length_and_routes_gradient() {
        let cfg = tiny_cfg();
        for position in [Placement::AfterInproj, Placement::BeforeInproj] {
            for n in [1usize, 3] {
                let mut s = pretrained_store(&cfg, 17);
                let spec = PeftSpec::affix_tuning(n, position, Placement::Prefix, false);
                let set = AdapterSet::apply_all(&mut s, &cfg, &[spec], 2).unwrap();
                let fwd = Forward::new(&s, &cfg, set.hook_set());
                let u = Tensor::rand_uniform(
                    vec![5, cfg.d_model],
                    -1.0,
                    1.0,
                    &mut rand_chacha::ChaCha8Rng::seed_from_u64(1),
                );
                let uv = fwd.graph().leaf(&u);
                let out = fwd.block(0, &uv).unwrap();
                assert_eq!(out.shape(), vec![5, cfg.d_model]);

                // Token embeddings still receive gradient through the
                // recurrence even though their output rows are dropped.
                let loss = fwd.loss(&batch(), &[0, 1]).unwrap();
                fwd.backward(&loss).unwrap();
                let grads = fwd.trainable_grads();
                let token_grad: f64 = set.adapters()[0]
                    .param_paths
                    .iter()
                    .map(|p| grads[p].data().iter().map(|v| v.abs()).sum::<f64>())
                    .sum();
                assert!(token_grad > 0.0, "affix tokens got no gradient ({position:?})");
            }
        }
    }

    #[test]
    fn additional_scan_rejects_zero_and_preserves_base_states() {
        let cfg = tiny_cfg();
        let mut s = pretrained_store(&cfg, 23);
        let bad = PeftSpec::additional_scan(0, Placement::Top, ScanInit::S4d);
        assert!(AdapterSet::apply_all(&mut s, &cfg, &[bad], 0).is_err());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(vec![4, cfg.d_inner()], -1.0, 1.0, &mut rng);
        let store = pretrained_store(&cfg, 23);
        let base_fwd = Forward::vanilla(&store, &cfg);
        let (_, base_states, _) = base_fwd.layer_scan_states(0, &x).unwrap();

        for end in [Placement::Top, Placement::Bottom] {
            let mut s = store.clone();
            let spec = PeftSpec::additional_scan(2, end, ScanInit::Constant(0.7));
            let set = AdapterSet::apply_all(&mut s, &cfg, &[spec], 9).unwrap();
            // Perturb the extension weights: base dims must stay exact.
            for a in set.adapters() {
                for p in &a.param_paths {
                    let shape = s.get(p).unwrap().shape().to_vec();
                    s.set_data(p, Tensor::full(shape, 0.42)).unwrap();
                }
            }
            let fwd = Forward::new(&s, &cfg, set.hook_set());
            let (_, ext_states, pre_start) = fwd.layer_scan_states(0, &x).unwrap();
            let n = cfg.d_state;
            for (t, (b, e)) in base_states.iter().zip(ext_states.iter()).enumerate() {
                for l in 0..cfg.d_inner() {
                    for j in 0..n {
                        let base_v = b.data()[l * n + j];
                        let ext_v = e.data()[l * e.shape()[1] + pre_start + j];
                        assert_eq!(base_v, ext_v, "state mismatch at t={t} l={l} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn neighbor_init_copies_adjacent_column() {
        let cfg = tiny_cfg();
        let mut s = pretrained_store(&cfg, 3);
        let set = AdapterSet::apply_all(
            &mut s,
            &cfg,
            &[PeftSpec::additional_scan(1, Placement::Bottom, ScanInit::Neighbor)],
            0,
        )
        .unwrap();
        let a_ext = s.get(&set.adapters()[0].param_paths[0]).unwrap();
        let a = s.get(&paths::a(0)).unwrap();
        let n = cfg.d_state;
        for l in 0..cfg.d_inner() {
            assert_eq!(a_ext.data()[l], a.data()[l * n + n - 1]);
        }
    }

    #[test]
    fn partial_tuning_flips_exactly_matching_paths() {
        let cfg = tiny_cfg();
        let mut s = pretrained_store(&cfg, 2);
        let set = AdapterSet::apply_all(&mut s, &cfg, &[PeftSpec::partial_tuning("d")], 0).unwrap();
        let trainable = s.trainable_paths();
        assert_eq!(trainable, vec!["layers.0.D".to_string(), "layers.1.D".to_string()]);
        assert_eq!(count_trainable_params(&s), cfg.n_layers * cfg.d_inner());
        drop(set);

        let mut s = pretrained_store(&cfg, 2);
        AdapterSet::apply_all(&mut s, &cfg, &[PeftSpec::partial_tuning("bias")], 0).unwrap();
        let trainable = s.trainable_paths();
        assert!(trainable.iter().all(|p| p.ends_with(".bias")));
        assert_eq!(trainable.len(), 2 * cfg.n_layers);
    }

    #[test]
    fn cls_token_tuning_requires_cls_token() {
        let mut cfg = tiny_cfg();
        cfg.use_cls_token = false;
        let mut s = pretrained_store(&cfg, 2);
        let err = AdapterSet::apply_all(&mut s, &cfg, &[PeftSpec::partial_tuning("cls_token")], 0);
        assert!(matches!(err, Err(PeftError::TargetAbsent(_))));
    }

    #[test]
    fn unknown_names_list_valid_choices() {
        let cfg = tiny_cfg();
        let mut s = pretrained_store(&cfg, 2);
        let err = AdapterSet::apply_all(&mut s, &cfg, &[PeftSpec::lora("head", 4, 0.1)], 0)
            .unwrap_err();
        assert!(err.to_string().contains("in_proj"), "{err}");
    }

    #[test]
    fn apply_remove_round_trip_restores_forward_bitwise() {
        let cfg = tiny_cfg();
        let store = pretrained_store(&cfg, 41);
        let base = logits_of(&store, &cfg, &AdapterSet::new(), &batch());
        let specs = vec![
            PeftSpec::lora("in_proj", 4, 0.3),
            PeftSpec::affix_tuning(2, Placement::AfterInproj, Placement::Infix, true),
            PeftSpec::partial_tuning("a"),
            PeftSpec::additional_scan(1, Placement::Bottom, ScanInit::S4d),
        ];
        let mut s = store.clone();
        let mut set = AdapterSet::apply_all(&mut s, &cfg, &specs, 77).unwrap();
        while !set.adapters().is_empty() {
            set.remove(&mut s, set.adapters().len() - 1).unwrap();
        }
        let restored = logits_of(&s, &cfg, &set, &batch());
        assert!(base.bit_eq(&restored));
        assert_eq!(count_trainable_params(&s), 0);
        assert_eq!(s.paths().count(), store.paths().count());
    }

    #[test]
    fn merge_matches_adapter_path_within_tolerance() {
        let cfg = tiny_cfg();
        let store = pretrained_store(&cfg, 53);
        let specs = vec![
            PeftSpec::lora("out_proj", 3, 0.4),
            PeftSpec::partial_lora("x", 2, 0.7),
            PeftSpec::affix_tuning(1, Placement::AfterInproj, Placement::Prefix, true),
        ];
        let mut s = store.clone();
        let mut set = AdapterSet::apply_all(&mut s, &cfg, &specs, 99).unwrap();
        // Give every adapter tensor nonzero values so merging moves weights.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        for a in set.adapters() {
            for p in &a.param_paths {
                let shape = s.get(p).unwrap().shape().to_vec();
                s.set_data(p, Tensor::rand_uniform(shape, -0.3, 0.3, &mut rng))
                    .unwrap();
            }
        }
        let before = logits_of(&s, &cfg, &set, &batch());
        let merged_count = set.merge_mergeable(&mut s, &cfg).unwrap();
        assert_eq!(merged_count, 3);
        let after = logits_of(&s, &cfg, &set, &batch());
        assert!(before.max_abs_diff(&after) < 1e-10);
    }

    #[test]
    fn merging_zero_init_lora_leaves_weights_bit_identical() {
        let cfg = tiny_cfg();
        let mut s = pretrained_store(&cfg, 61);
        let w_before = s.get(&paths::in_proj(0)).unwrap().clone();
        let mut set =
            AdapterSet::apply_all(&mut s, &cfg, &[PeftSpec::lora("in_proj", 4, 0.9)], 8).unwrap();
        set.merge(&mut s, &cfg, 0).unwrap();
        assert!(s.get(&paths::in_proj(0)).unwrap().bit_eq(&w_before));
    }

    #[test]
    fn parallel_adapter_refuses_to_merge() {
        let cfg = tiny_cfg();
        let mut s = pretrained_store(&cfg, 67);
        let mut set =
            AdapterSet::apply_all(&mut s, &cfg, &[PeftSpec::parallel_adapter(4, 0.1)], 0).unwrap();
        assert!(matches!(
            set.merge(&mut s, &cfg, 0),
            Err(PeftError::NotMergeable(_))
        ));
    }

    #[test]
    fn anchored_decay_gradient() {
        let w = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let w_pre = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let g = anchored_weight_decay_grad(&w, &w_pre, 1e-3).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0 * 1e-3 * 2.0]);
        let zero = anchored_weight_decay_grad(&w, &w, 1e-3).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let plain = anchored_weight_decay_grad(&w, &w_pre, 0.0).unwrap();
        assert!(plain.data().iter().all(|&v| v == 0.0));
        assert!(anchored_weight_decay_grad(&w, &Tensor::zeros(vec![3]), 1.0).is_err());
    }

    #[test]
    fn param_count_formulas_match_enumeration_spot_checks() {
        // LoRA(in_proj) r=4 at d_model=64, d_inner=128: 4*(64+256) = 1280.
        let cfg = MambaConfig::desk_default();
        let spec = PeftSpec::lora("in_proj", 4, 0.1);
        assert_eq!(spec.param_count(&cfg).unwrap(), 1280);
        let mut s = pretrained_store(&cfg, 1);
        let set = AdapterSet::apply_all(&mut s, &cfg, &[spec.clone()], 0).unwrap();
        assert_eq!(set.adapters()[0].enumerated_count(&s), 1280);
        assert_eq!(count_trainable_params(&s), 1280);

        // LoRA_p(X): r*(d_model + d_inner).
        let px = PeftSpec::partial_lora("x", 8, 0.1);
        assert_eq!(px.param_count(&cfg).unwrap(), 8 * (64 + 128));

        // Additional-scan n'=2: per layer d_inner*n' for A plus d_inner*2n'.
        let scan = PeftSpec::additional_scan(2, Placement::Top, ScanInit::S4d);
        assert_eq!(
            scan.param_count(&cfg).unwrap(),
            cfg.n_layers * (128 * 2 + 128 * 4)
        );
    }

    #[test]
    fn spec_round_trips_through_json() {
        let specs = vec![
            PeftSpec::lora("in_proj", 8, 0.1).with_lr(1e-3).with_wd(1e-4),
            PeftSpec::affix_tuning(3, Placement::AfterInproj, Placement::Prefix, true),
            PeftSpec::additional_scan(2, Placement::Bottom, ScanInit::Constant(0.1)),
            PeftSpec::prompt_tuning(2, Placement::PrefixSuffix),
            PeftSpec::partial_tuning("conv1d"),
        ];
        let json = serde_json::to_string_pretty(&specs).unwrap();
        let back: Vec<PeftSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(specs, back);
        assert!(json.contains("\"prefix+suffix\""));
    }
}
