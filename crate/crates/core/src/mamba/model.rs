//! Forward computation: the S6 parameterization, the per-channel selective
//! scan, the block (in_proj -> conv1d -> scan -> gating -> out_proj), and the
//! sequence classifier. Adapter hooks fire at their named sites; an empty
//! hook set gives the vanilla model.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::peft::hooks::{
    infix_positions, prompt_positions, AffixHook, AffixPlacement, AffixPosition, AffixTokens,
    HookSet, ScanEnd,
};
use crate::tensor::{insert_mapping, Graph, Tensor, Var};

use super::{paths, ClsPosition, MambaConfig, ModelError, ParamStore, Result};

/// A linear site together with the low-rank patches attached to it.
/// The base weight is `[in, out]`; forward is `x . W` plus each patch
/// `scale * (x . down) . up`, padded into its column range when restricted.
pub struct LinearOp {
    pub weight: Var,
    out_width: usize,
    patches: Vec<BoundLora>,
}

struct BoundLora {
    down: Var,
    up: Var,
    scale: f64,
    cols: Option<(usize, usize)>,
}

impl LinearOp {
    pub fn plain(weight: Var) -> Self {
        let out_width = weight.shape()[1];
        LinearOp {
            weight,
            out_width,
            patches: Vec::new(),
        }
    }

    pub fn apply(&self, x: &Var) -> Result<Var> {
        let mut out = x.matmul(&self.weight)?;
        for p in &self.patches {
            let mut upd = x.matmul(&p.down)?.matmul(&p.up)?.scale(p.scale)?;
            if let Some((start, len)) = p.cols {
                upd = upd.pad_cols(start, self.out_width - start - len)?;
            }
            out = out.add(&upd)?;
        }
        Ok(out)
    }

    /// Row-gather version for the embedding site.
    pub fn apply_lookup(&self, rows: &[usize]) -> Result<Var> {
        let mut out = self.weight.lookup(rows)?;
        for p in &self.patches {
            let mut upd = p.down.lookup(rows)?.matmul(&p.up)?.scale(p.scale)?;
            if let Some((start, len)) = p.cols {
                upd = upd.pad_cols(start, self.out_width - start - len)?;
            }
            out = out.add(&upd)?;
        }
        Ok(out)
    }
}

/// One state-width extension bound to graph variables.
pub struct BoundScanExt {
    /// `[d_inner, n_prime]` extra decay rates.
    pub a_ext: Var,
    /// `[d_inner, 2*n_prime]`: B extension columns then C extension columns.
    pub x_proj_ext: Var,
    pub end: ScanEnd,
}

/// Inputs to the S6 parameterization for one layer.
pub struct S6Inputs {
    pub x_proj: LinearOp,
    pub dt_proj: LinearOp,
    /// `[d_inner]` bias added before the softplus.
    pub dt_bias: Var,
    /// `[d_inner, N]` positive decay rates, used as `exp(-delta * A)`.
    pub a: Var,
    pub dt_rank: usize,
    pub d_state: usize,
    pub ext: Vec<BoundScanExt>,
}

pub struct S6Output {
    /// `[T, L, N_total]` per-step decay factors.
    pub a_bar: Var,
    /// `[T, L, N_total]` per-step input gains.
    pub b_bar: Var,
    /// `[T, N_total]` readout coefficients (raw, never delta-scaled).
    pub c: Var,
    /// `[T, L]` step sizes after softplus.
    pub delta: Var,
    pub n_total: usize,
    /// Column where the pretrained N dims start (nonzero when extensions
    /// attach at the top).
    pub pre_start: usize,
}

/// Computes the input-dependent scan tensors:
/// `delta = softplus(dt_proj(x_proj(x)[..dt_rank]) + bias)`,
/// `B, C = x_proj(x)[dt_rank..]`, `A_bar = exp(-delta o A)`,
/// `B_bar = delta o B`, with state-width extensions appended per hook.
pub fn s6_compute(x_inner: &Var, p: &S6Inputs) -> Result<S6Output> {
    let shape = x_inner.shape();
    let (t, l) = (shape[0], shape[1]);
    let xp = p.x_proj.apply(x_inner)?;
    let dt_low = xp.slice_cols(0, p.dt_rank)?;
    let mut b = xp.slice_cols(p.dt_rank, p.d_state)?;
    let mut c = xp.slice_cols(p.dt_rank + p.d_state, p.d_state)?;
    let mut a_full = p.a.clone();
    let mut pre_start = 0usize;
    for e in &p.ext {
        let n_prime = e.a_ext.shape()[1];
        let xpe = x_inner.matmul(&e.x_proj_ext)?;
        let b_ext = xpe.slice_cols(0, n_prime)?;
        let c_ext = xpe.slice_cols(n_prime, n_prime)?;
        match e.end {
            ScanEnd::Top => {
                a_full = e.a_ext.concat_cols(&a_full)?;
                b = b_ext.concat_cols(&b)?;
                c = c_ext.concat_cols(&c)?;
                pre_start += n_prime;
            }
            ScanEnd::Bottom => {
                a_full = a_full.concat_cols(&e.a_ext)?;
                b = b.concat_cols(&b_ext)?;
                c = c.concat_cols(&c_ext)?;
            }
        }
    }
    let n_total = a_full.shape()[1];
    let delta = p
        .dt_proj
        .apply(&dt_low)?
        .add(&p.dt_bias.reshape(&[1, l])?)?
        .softplus()?;
    let delta3 = delta.reshape(&[t, l, 1])?;
    let a_bar = delta3.mul(&a_full.reshape(&[1, l, n_total])?)?.neg()?.exp()?;
    let b_bar = delta3.mul(&b.reshape(&[t, 1, n_total])?)?;
    Ok(S6Output {
        a_bar,
        b_bar,
        c,
        delta,
        n_total,
        pre_start,
    })
}

fn scan_impl(
    a_bar: &Var,
    b_bar: &Var,
    c: &Var,
    x_inner: &Var,
    d: &Var,
    mut states: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let xs = x_inner.shape();
    let (t, l) = (xs[0], xs[1]);
    let abs = a_bar.shape();
    if abs.len() != 3 || abs[0] != t || abs[1] != l || b_bar.shape() != abs {
        return Err(ModelError::Config(format!(
            "selective_scan: inconsistent shapes x {:?}, A_bar {:?}, B_bar {:?}",
            xs,
            abs,
            b_bar.shape()
        )));
    }
    let n_total = abs[2];
    if c.shape() != vec![t, n_total] || d.value().numel() != l {
        return Err(ModelError::Config(format!(
            "selective_scan: inconsistent readout shapes C {:?}, D {:?}",
            c.shape(),
            d.shape()
        )));
    }
    let g = x_inner.graph();
    let mut h = g.leaf(&Tensor::zeros(vec![l, n_total]));
    let d_row = d.reshape(&[1, l])?;
    let mut ys = Vec::with_capacity(t);
    for step in 0..t {
        let a_t = a_bar.slice_rows(step, 1)?.reshape(&[l, n_total])?;
        let b_t = b_bar.slice_rows(step, 1)?.reshape(&[l, n_total])?;
        let x_t = x_inner.slice_rows(step, 1)?;
        let x_col = x_t.reshape(&[l, 1])?;
        h = a_t.mul(&h)?.add(&b_t.mul(&x_col)?)?;
        if let Some(sink) = states.as_deref_mut() {
            sink.push(h.value());
        }
        let c_t = c.slice_rows(step, 1)?.reshape(&[n_total, 1])?;
        let y_t = h.matmul(&c_t)?.reshape(&[1, l])?;
        ys.push(y_t.add(&x_t.mul(&d_row)?)?);
    }
    Var::concat_rows(&ys).map_err(Into::into)
}

/// Per-channel diagonal recurrence `H_t = A_bar_t o H_{t-1} + B_bar_t o x_t`
/// with readout `Y_t[l] = sum_n H_t[l,n] C_t[n] + D[l] x_t[l]`. `H_0 = 0`.
pub fn selective_scan(a_bar: &Var, b_bar: &Var, c: &Var, x_inner: &Var, d: &Var) -> Result<Var> {
    scan_impl(a_bar, b_bar, c, x_inner, d, None)
}

/// Same recurrence, also returning the `[L, N_total]` state after every step.
pub fn selective_scan_with_states(
    a_bar: &Var,
    b_bar: &Var,
    c: &Var,
    x_inner: &Var,
    d: &Var,
) -> Result<(Var, Vec<Tensor>)> {
    let mut states = Vec::new();
    let y = scan_impl(a_bar, b_bar, c, x_inner, d, Some(&mut states))?;
    Ok((y, states))
}

/// One forward pass over a store: lifts parameters lazily into a graph,
/// applies hooks, and exposes gradients per path after `backward`.
pub struct Forward<'a> {
    graph: Graph,
    store: &'a ParamStore,
    cfg: &'a MambaConfig,
    hooks: HookSet,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a MambaConfig, hooks: HookSet) -> Self {
        Self::on_graph(Graph::new(), store, cfg, hooks)
    }

    pub fn on_graph(
        graph: Graph,
        store: &'a ParamStore,
        cfg: &'a MambaConfig,
        hooks: HookSet,
    ) -> Self {
        Forward {
            graph,
            store,
            cfg,
            hooks,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn vanilla(store: &'a ParamStore, cfg: &'a MambaConfig) -> Self {
        Self::new(store, cfg, HookSet::default())
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Uses `var` in place of the stored tensor for `path` (gradient probes).
    pub fn bind_override(&self, path: &str, var: Var) {
        self.bound.borrow_mut().insert(path.to_string(), var);
    }

    fn param(&self, path: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(path) {
            return Ok(v.clone());
        }
        let t = self.store.expect(path)?;
        let v = self.graph.leaf(t);
        self.bound.borrow_mut().insert(path.to_string(), v.clone());
        Ok(v)
    }

    fn linear(&self, site: &str, weight_path: &str) -> Result<LinearOp> {
        let weight = self.param(weight_path)?;
        let out_width = weight.shape()[1];
        let mut patches = Vec::new();
        if let Some(list) = self.hooks.lora.get(site) {
            for p in list {
                patches.push(BoundLora {
                    down: self.param(&p.down)?,
                    up: self.param(&p.up)?,
                    scale: p.scale,
                    cols: p.cols,
                });
            }
        }
        Ok(LinearOp {
            weight,
            out_width,
            patches,
        })
    }

    /// Bound S6 inputs for a layer, including any state-width extensions.
    pub fn s6_inputs(&self, layer: usize) -> Result<S6Inputs> {
        let mut ext = Vec::new();
        for hook in &self.hooks.scan_ext {
            ext.push(BoundScanExt {
                a_ext: self.param(&hook.a_ext[layer])?,
                x_proj_ext: self.param(&hook.x_proj_ext[layer])?,
                end: hook.end,
            });
        }
        Ok(S6Inputs {
            x_proj: self.linear("x_proj", &paths::x_proj(layer))?,
            dt_proj: self.linear("dt_proj", &paths::dt_proj_weight(layer))?,
            dt_bias: self.param(&paths::dt_proj_bias(layer))?,
            a: self.param(&paths::a(layer))?,
            dt_rank: self.cfg.dt_rank,
            d_state: self.cfg.d_state,
            ext,
        })
    }

    fn insert_affix(&self, layer: usize, hook: &AffixHook, seq: &Var) -> Result<(Var, Vec<usize>)> {
        let t = seq.shape()[0];
        let tokens = match &hook.tokens {
            AffixTokens::PerLayer(paths) => self.param(&paths[layer])?,
            AffixTokens::Projected {
                shared,
                projections,
            } => {
                let e = self.param(shared)?;
                let p = self.param(&projections[layer])?;
                e.matmul(&p)?
            }
        };
        let positions = match hook.placement {
            AffixPlacement::Prefix => (0..hook.n).collect::<Vec<_>>(),
            AffixPlacement::Infix => infix_positions(t, hook.n),
        };
        Ok((seq.insert_rows(&tokens, &positions)?, positions))
    }

    /// One residual block. Affix tokens insert at their position and are
    /// dropped at the matching downstream point (after the scan for
    /// `after_inproj`, before `out_proj` for `before_inproj`), so the output
    /// length always equals the input length.
    pub fn block(&self, layer: usize, u: &Var) -> Result<Var> {
        let di = self.cfg.d_inner();
        let mut before_drops = Vec::new();
        let mut work = u.clone();
        for hook in &self.hooks.affix {
            if hook.position == AffixPosition::BeforeInproj {
                let (next, pos) = self.insert_affix(layer, hook, &work)?;
                work = next;
                before_drops.push(pos);
            }
        }
        let in_proj = self.linear("in_proj", &paths::in_proj(layer))?;
        let mut xz = in_proj.apply(&work)?;
        let mut after_drops = Vec::new();
        for hook in &self.hooks.affix {
            if hook.position == AffixPosition::AfterInproj {
                let (next, pos) = self.insert_affix(layer, hook, &xz)?;
                xz = next;
                after_drops.push(pos);
            }
        }
        let x = xz.slice_cols(0, di)?;
        let mut z = xz.slice_cols(di, di)?;
        let conv_w = self.param(&paths::conv_weight(layer))?;
        let conv_b = self.param(&paths::conv_bias(layer))?;
        let x = x.causal_conv1d(&conv_w, &conv_b)?.silu()?;
        let s6p = self.s6_inputs(layer)?;
        let s6 = s6_compute(&x, &s6p)?;
        let d = self.param(&paths::d(layer))?;
        let mut y = selective_scan(&s6.a_bar, &s6.b_bar, &s6.c, &x, &d)?;
        for pos in after_drops.iter().rev() {
            y = y.drop_rows(pos)?;
            z = z.drop_rows(pos)?;
        }
        let mut gated = y.mul(&z.silu()?)?;
        for pos in before_drops.iter().rev() {
            gated = gated.drop_rows(pos)?;
        }
        let out_proj = self.linear("out_proj", &paths::out_proj(layer))?;
        let mut out = out_proj.apply(&gated)?;
        for pa in &self.hooks.parallel {
            let down = self.param(&pa.down)?;
            let up = self.param(&pa.up)?;
            let add = gated.matmul(&down)?.relu()?.matmul(&up)?.scale(pa.scale)?;
            out = out.add(&add)?;
        }
        u.add(&out).map_err(Into::into)
    }

    fn example_logits(&self, tokens: &[usize]) -> Result<Var> {
        let cfg = self.cfg;
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::Config("empty input sequence".into()));
        }
        for &tok in tokens {
            if tok >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: tok,
                    vocab: cfg.vocab_size,
                });
            }
        }
        let n_prompt: usize = self.hooks.prompt.iter().map(|p| p.n).sum();
        let total = t + usize::from(cfg.use_cls_token) + n_prompt;
        if total > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                got: total,
                max: cfg.max_seq_len,
            });
        }
        let embedding = self.linear("embedding", paths::EMBEDDING)?;
        let mut seq = embedding.apply_lookup(tokens)?;
        if cfg.use_pos_embed {
            let pos = self.param(paths::POS_EMBED)?.slice_rows(0, t)?;
            seq = seq.add(&pos)?;
        }
        let mut cls_idx = None;
        if cfg.use_cls_token {
            let cls = self.param(paths::CLS_TOKEN)?;
            let idx = match cfg.cls_position {
                ClsPosition::Front => 0,
                ClsPosition::Middle => t / 2,
            };
            seq = seq.insert_rows(&cls, &[idx])?;
            cls_idx = Some(idx);
        }
        for p in &self.hooks.prompt {
            let cur = seq.shape()[0];
            let positions = prompt_positions(p.placement, cur, p.n);
            let tokens_var = self.param(&p.tokens)?;
            seq = seq.insert_rows(&tokens_var, &positions)?;
            if let Some(ci) = cls_idx {
                cls_idx = Some(insert_mapping(cur, &positions)[ci]);
            }
        }
        for layer in 0..cfg.n_layers {
            seq = self.block(layer, &seq)?;
        }
        let feat = match cls_idx {
            Some(ci) => seq.slice_rows(ci, 1)?,
            None => {
                let rows = seq.shape()[0];
                let ones = self.graph.leaf(&Tensor::full(vec![1, rows], 1.0));
                ones.matmul(&seq)?.scale(1.0 / rows as f64)?
            }
        };
        let head = self.linear("head", paths::HEAD_WEIGHT)?;
        let bias = self.param(paths::HEAD_BIAS)?.reshape(&[1, cfg.n_classes])?;
        head.apply(&feat)?.add(&bias).map_err(Into::into)
    }

    /// Class scores for a batch of token sequences, `[B, n_classes]`.
    pub fn logits(&self, batch: &[Vec<usize>]) -> Result<Var> {
        let rows: Vec<Var> = batch
            .iter()
            .map(|ex| self.example_logits(ex))
            .collect::<Result<_>>()?;
        Var::concat_rows(&rows).map_err(Into::into)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &[Vec<usize>], labels: &[usize]) -> Result<Var> {
        self.logits(batch)?
            .softmax_cross_entropy(labels)
            .map_err(Into::into)
    }

    pub fn backward(&self, loss: &Var) -> Result<()> {
        self.graph.backward(loss).map_err(Into::into)
    }

    /// Gradients of every trainable parameter touched by this pass. Call
    /// after `backward`.
    pub fn trainable_grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(path, _)| self.store.is_trainable(path))
            .map(|(path, var)| (path.clone(), var.grad()))
            .collect()
    }

    /// Runs layer `layer`'s SSM path on a raw inner activation and returns
    /// the output, the per-step state trajectory, and the column where the
    /// pretrained state dims start.
    pub fn layer_scan_states(
        &self,
        layer: usize,
        x_inner: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>, usize)> {
        let x = self.graph.leaf(x_inner);
        let s6p = self.s6_inputs(layer)?;
        let s6 = s6_compute(&x, &s6p)?;
        let d = self.param(&paths::d(layer))?;
        let (y, states) = selective_scan_with_states(&s6.a_bar, &s6.b_bar, &s6.c, &x, &d)?;
        Ok((y.value(), states, s6.pre_start))
    }
}
