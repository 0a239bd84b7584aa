//! Self-contained Tree-structured Parzen Estimator sampler.
//!
//! After a random startup phase the history splits at the objective's
//! good-fraction quantile; each dimension gets 1-d kernel (or categorical
//! frequency) estimates over the good and bad sets, candidates are drawn
//! from the good model, and the candidate maximizing the density ratio wins.
//! Deterministic given the RNG state.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trials::{TrialRecord, TrialStatus};
use super::SearchError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    Boolean,
    LogUniform { lo: f64, hi: f64 },
    IntUniform { lo: i64, hi: i64 },
    Categorical { values: Vec<String> },
}

/// Ordered, validated search dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct SearchSpace {
    dims: Vec<(String, DimKind)>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(mut self, name: &str, kind: DimKind) -> Result<Self, SearchError> {
        if self.dims.iter().any(|(n, _)| n == name) {
            return Err(SearchError::DuplicateDim(name.to_string()));
        }
        match &kind {
            DimKind::LogUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) {
                    return Err(SearchError::BadRange(name.to_string()));
                }
            }
            DimKind::IntUniform { lo, hi } => {
                if lo >= hi {
                    return Err(SearchError::BadRange(name.to_string()));
                }
            }
            DimKind::Categorical { values } => {
                if values.is_empty() {
                    return Err(SearchError::EmptyCategorical(name.to_string()));
                }
            }
            DimKind::Boolean => {}
        }
        self.dims.push((name.to_string(), kind));
        Ok(self)
    }

    pub fn dims(&self) -> &[(String, DimKind)] {
        &self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// True when the assignment covers every dimension with an in-range value.
    pub fn contains(&self, assignment: &Assignment) -> bool {
        self.dims.iter().all(|(name, kind)| {
            assignment.get(name).is_some_and(|v| match (kind, v) {
                (DimKind::Boolean, ParamValue::Bool(_)) => true,
                (DimKind::LogUniform { lo, hi }, ParamValue::Float(x)) => x >= lo && x <= hi,
                (DimKind::IntUniform { lo, hi }, ParamValue::Int(x)) => x >= lo && x <= hi,
                (DimKind::Categorical { values }, ParamValue::Cat(c)) => values.contains(c),
                _ => false,
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Cat(String),
}

impl ParamValue {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Float(x) => Some(*x),
            ParamValue::Int(x) => Some(*x as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Cat(s) => Some(s),
            _ => None,
        }
    }
}

pub type Assignment = BTreeMap<String, ParamValue>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    /// Good-fraction quantile.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Candidates drawn from the good model per suggestion.
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    /// Random prior draws before the model kicks in.
    #[serde(default = "default_startup")]
    pub n_startup: usize,
}

fn default_gamma() -> f64 {
    0.25
}
fn default_candidates() -> usize {
    24
}
fn default_startup() -> usize {
    10
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: default_gamma(),
            n_candidates: default_candidates(),
            n_startup: default_startup(),
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) || self.n_candidates == 0 {
            return Err(SearchError::BadConfig(
                "tpe needs 0 < gamma < 1 and n_candidates >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Samples every dimension from its prior (the random-search baseline).
pub fn prior_sample<R: Rng>(space: &SearchSpace, rng: &mut R) -> Assignment {
    let mut out = Assignment::new();
    for (name, kind) in space.dims() {
        let v = match kind {
            DimKind::Boolean => ParamValue::Bool(rng.gen_bool(0.5)),
            DimKind::LogUniform { lo, hi } => {
                ParamValue::Float(rng.gen_range(lo.ln()..hi.ln()).exp())
            }
            DimKind::IntUniform { lo, hi } => ParamValue::Int(rng.gen_range(*lo..=*hi)),
            DimKind::Categorical { values } => {
                ParamValue::Cat(values[rng.gen_range(0..values.len())].clone())
            }
        };
        out.insert(name.clone(), v);
    }
    out
}

/// One dimension's density model over a trial subset.
enum DimModel {
    Kde {
        points: Vec<f64>,
        bandwidth: f64,
        lo: f64,
        hi: f64,
    },
    Frequency {
        probs: BTreeMap<String, f64>,
    },
}

const KDE_BANDWIDTH_FLOOR: f64 = 0.01;

fn transform(kind: &DimKind, v: &ParamValue) -> Option<f64> {
    match kind {
        DimKind::LogUniform { .. } => v.as_f64().map(f64::ln),
        DimKind::IntUniform { .. } => v.as_f64(),
        _ => None,
    }
}

fn category_token(v: &ParamValue) -> String {
    match v {
        ParamValue::Bool(b) => b.to_string(),
        ParamValue::Cat(s) => s.clone(),
        ParamValue::Int(x) => x.to_string(),
        ParamValue::Float(x) => x.to_string(),
    }
}

fn dim_bounds(kind: &DimKind) -> (f64, f64) {
    match kind {
        DimKind::LogUniform { lo, hi } => (lo.ln(), hi.ln()),
        DimKind::IntUniform { lo, hi } => (*lo as f64, *hi as f64),
        _ => (0.0, 1.0),
    }
}

fn categories(kind: &DimKind) -> Vec<String> {
    match kind {
        DimKind::Boolean => vec!["false".into(), "true".into()],
        DimKind::Categorical { values } => values.clone(),
        _ => vec![],
    }
}

impl DimModel {
    fn fit(kind: &DimKind, set: &[&Assignment], name: &str) -> DimModel {
        match kind {
            DimKind::LogUniform { .. } | DimKind::IntUniform { .. } => {
                let (lo, hi) = dim_bounds(kind);
                let range = hi - lo;
                let points: Vec<f64> = set
                    .iter()
                    .filter_map(|a| a.get(name).and_then(|v| transform(kind, v)))
                    .collect();
                let m = points.len();
                // Scott's rule over the mixture the estimator represents
                // (the observed points plus the uniform prior component),
                // clamped below by 1% of the range. Using the mixture
                // variance keeps the bandwidth from collapsing once the good
                // set concentrates.
                let bandwidth = if m >= 1 {
                    let k = (m + 1) as f64;
                    let mid = 0.5 * (lo + hi);
                    let mean = (points.iter().sum::<f64>() + mid) / k;
                    let second_moment = (points.iter().map(|p| p * p).sum::<f64>()
                        + mid * mid
                        + range * range / 12.0)
                        / k;
                    let var = (second_moment - mean * mean).max(0.0);
                    (var.sqrt() * k.powf(-0.2))
                        .clamp(KDE_BANDWIDTH_FLOOR * range, range.max(f64::MIN_POSITIVE))
                } else {
                    0.25 * range
                };
                DimModel::Kde {
                    points,
                    bandwidth,
                    lo,
                    hi,
                }
            }
            DimKind::Boolean | DimKind::Categorical { .. } => {
                let cats = categories(kind);
                let mut counts: BTreeMap<String, f64> =
                    cats.iter().map(|c| (c.clone(), 0.0)).collect();
                let mut total = 0.0;
                for a in set {
                    if let Some(v) = a.get(name) {
                        *counts.entry(category_token(v)).or_insert(0.0) += 1.0;
                        total += 1.0;
                    }
                }
                // Light additive smoothing keeps every category reachable
                // without washing out a decisive history.
                let smoothing = 0.1;
                let k = cats.len() as f64;
                let probs = counts
                    .into_iter()
                    .map(|(c, n)| (c, (n + smoothing) / (total + smoothing * k)))
                    .collect();
                DimModel::Frequency { probs }
            }
        }
    }

    fn log_density(&self, kind: &DimKind, v: &ParamValue) -> f64 {
        match self {
            DimModel::Kde {
                points,
                bandwidth,
                lo,
                hi,
            } => {
                let x = transform(kind, v).unwrap_or(*lo);
                let range = hi - lo;
                let m = points.len();
                // Mixture of the kernels and a uniform prior component.
                let mut density = 1.0 / range.max(f64::MIN_POSITIVE);
                for p in points {
                    let z = (x - p) / bandwidth;
                    density += (-0.5 * z * z).exp()
                        / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
                }
                (density / (m + 1) as f64).max(f64::MIN_POSITIVE).ln()
            }
            DimModel::Frequency { probs } => probs
                .get(&category_token(v))
                .copied()
                .unwrap_or(f64::MIN_POSITIVE)
                .max(f64::MIN_POSITIVE)
                .ln(),
        }
    }

    fn sample<R: Rng>(&self, kind: &DimKind, rng: &mut R) -> ParamValue {
        match self {
            DimModel::Kde {
                points,
                bandwidth,
                lo,
                hi,
            } => {
                let m = points.len();
                // Component m is the uniform prior.
                let pick = rng.gen_range(0..=m);
                let raw = if pick == m {
                    rng.gen_range(*lo..*hi)
                } else {
                    points[pick] + bandwidth * standard_normal(rng)
                };
                // Reflect at the bounds so the edges don't accumulate atoms.
                let mut reflected = raw;
                if reflected < *lo {
                    reflected = lo + (lo - reflected);
                }
                if reflected > *hi {
                    reflected = hi - (reflected - hi);
                }
                let clamped = reflected.clamp(*lo, *hi);
                match kind {
                    DimKind::LogUniform { lo, hi } => {
                        ParamValue::Float(clamped.exp().clamp(*lo, *hi))
                    }
                    DimKind::IntUniform { lo, hi } => {
                        ParamValue::Int((clamped.round() as i64).clamp(*lo, *hi))
                    }
                    _ => unreachable!("kde only fits numeric dims"),
                }
            }
            DimModel::Frequency { probs } => {
                let total: f64 = probs.values().sum();
                let mut u = rng.gen_range(0.0..total);
                let mut chosen = probs.keys().last().cloned().unwrap_or_default();
                for (c, p) in probs {
                    if u < *p {
                        chosen = c.clone();
                        break;
                    }
                    u -= p;
                }
                match kind {
                    DimKind::Boolean => ParamValue::Bool(chosen == "true"),
                    _ => ParamValue::Cat(chosen),
                }
            }
        }
    }
}

fn canonical(assignment: &Assignment) -> String {
    serde_json::to_string(assignment).expect("assignments serialize")
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; both draws consumed to stay deterministic per call.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Suggests the next assignment. With fewer finished trials than the startup
/// budget this is a prior draw; afterwards candidates from the good-set model
/// are ranked by the good/bad density ratio.
pub fn tpe_suggest<R: Rng>(
    space: &SearchSpace,
    history: &[TrialRecord],
    cfg: &TpeConfig,
    rng: &mut R,
) -> Result<Assignment, SearchError> {
    if space.is_empty() {
        return Err(SearchError::EmptySpace);
    }
    cfg.validate()?;
    let ok: Vec<(&Assignment, f64)> = history
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .filter_map(|t| t.objective.map(|o| (&t.params, o)))
        .collect();
    if ok.len() < cfg.n_startup.max(2) {
        return Ok(prior_sample(space, rng));
    }
    // Higher objective is better; ties keep earlier trials first.
    let mut order: Vec<usize> = (0..ok.len()).collect();
    order.sort_by(|&a, &b| ok[b].1.total_cmp(&ok[a].1).then(a.cmp(&b)));
    let n_good = ((cfg.gamma * ok.len() as f64).ceil() as usize).clamp(1, ok.len() - 1);
    let good: Vec<&Assignment> = order[..n_good].iter().map(|&i| ok[i].0).collect();
    let bad: Vec<&Assignment> = order[n_good..].iter().map(|&i| ok[i].0).collect();

    let models: Vec<(&String, &DimKind, DimModel, DimModel)> = space
        .dims()
        .iter()
        .map(|(name, kind)| {
            (
                name,
                kind,
                DimModel::fit(kind, &good, name),
                DimModel::fit(kind, &bad, name),
            )
        })
        .collect();

    // Exact re-proposals of evaluated points are skipped so discrete spaces
    // keep exploring instead of resampling their current mode forever.
    let seen: std::collections::BTreeSet<String> = history
        .iter()
        .map(|t| canonical(&t.params))
        .collect();
    let mut best_fresh: Option<(f64, Assignment)> = None;
    let mut best_any: Option<(f64, Assignment)> = None;
    for _ in 0..cfg.n_candidates {
        let mut candidate = Assignment::new();
        let mut score = 0.0;
        for (name, kind, l, g) in &models {
            let v = l.sample(kind, rng);
            score += l.log_density(kind, &v) - g.log_density(kind, &v);
            candidate.insert((*name).clone(), v);
        }
        if best_any.as_ref().map_or(true, |(s, _)| score > *s) {
            best_any = Some((score, candidate.clone()));
        }
        if !seen.contains(&canonical(&candidate))
            && best_fresh.as_ref().map_or(true, |(s, _)| score > *s)
        {
            best_fresh = Some((score, candidate));
        }
    }
    // When the whole candidate set is already evaluated (tiny discrete
    // spaces, late plateaus) the model's best choice still stands.
    Ok(best_fresh
        .or(best_any)
        .expect("n_candidates >= 1")
        .1)
}
