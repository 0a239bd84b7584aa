//! Decoupled-weight-decay adaptive-moment optimizer and the warmup+cosine
//! schedule.

use std::collections::BTreeMap;

use crate::mamba::ParamStore;
use crate::peft::PathPolicy;
use crate::tensor::Tensor;

use super::TrainError;

/// Linear warmup to the peak, then a cosine decay to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
}

/// `lr(0) = 0` when warmup is enabled, the peak exactly at the warmup
/// boundary, and `peak/2` at the cosine midpoint; reaches 0 at `total_steps`.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if s.warmup_steps > 0 && step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    if s.total_steps <= s.warmup_steps {
        return s.peak_lr;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    let progress = progress.min(1.0);
    s.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter first/second moment buffers plus the step counter.
/// Moment buffers exist only for trainable paths.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_wd: f64,
    policies: BTreeMap<String, PathPolicy>,
}

impl OptimizerState {
    pub fn new(
        store: &ParamStore,
        base_wd: f64,
        policies: BTreeMap<String, PathPolicy>,
    ) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for path in store.trainable_paths() {
            let n = store.get(&path).map(|t| t.numel()).unwrap_or(0);
            m.insert(path.clone(), vec![0.0; n]);
            v.insert(path, vec![0.0; n]);
        }
        OptimizerState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_wd,
            policies,
        }
    }

    pub fn tracked_paths(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }
}

/// One decoupled update over every tracked path:
/// `W -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * decay_direction`,
/// where the decay direction is `W` for additive-adapter parameters and
/// `W - W_pretrained` for anchored (partial-tuning) parameters. Per-path
/// lr/wd overrides rescale against the schedule peak.
pub fn adamw_step(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    grads: &BTreeMap<String, Tensor>,
    schedule: &Schedule,
) -> Result<(), TrainError> {
    let lr_now = lr_at(opt.step, schedule);
    let t = (opt.step + 1) as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let paths: Vec<String> = opt.m.keys().cloned().collect();
    for path in paths {
        let grad = grads
            .get(&path)
            .ok_or_else(|| TrainError::MissingGrad(path.clone()))?;
        let policy = opt.policies.get(&path).copied().unwrap_or_default();
        let lr = match policy.lr {
            Some(peak_override) if schedule.peak_lr > 0.0 => {
                lr_now * (peak_override / schedule.peak_lr)
            }
            Some(_) => 0.0,
            None => lr_now,
        };
        let wd = policy.wd.unwrap_or(opt.base_wd);
        let anchor = if policy.anchored {
            Some(store.pretrained(&path).cloned().ok_or_else(|| {
                TrainError::MissingGrad(format!("{path} has no pretrained anchor"))
            })?)
        } else {
            None
        };
        let mut w = store.get(&path).cloned().ok_or_else(|| {
            TrainError::MissingGrad(format!("{path} vanished from the store"))
        })?;
        let m = opt.m.get_mut(&path).expect("tracked");
        let v = opt.v.get_mut(&path).expect("tracked");
        let g = grad.data();
        let data = w.data_mut();
        for i in 0..data.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let decay_dir = match &anchor {
                Some(pre) => data[i] - pre.data()[i],
                None => data[i],
            };
            data[i] -= lr * m_hat / (v_hat.sqrt() + opt.eps) + lr * wd * decay_dir;
        }
        store.set_data(&path, w)?;
    }
    opt.step += 1;
    Ok(())
}
