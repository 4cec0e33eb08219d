use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// AdamW moments mirroring a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub hyper: AdamWConfig,
}

impl OptimState {
    pub fn new(params: &ParamStore, hyper: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            hyper,
        }
    }
}

/// One AdamW update with decoupled weight decay: `p ← p(1 - lr·wd)` for
/// parameters flagged for decay, then the bias-corrected Adam step.
pub fn adamw_step(opt: &mut OptimState, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                opt.m.len(),
                params.len()
            ),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() || opt.m[id.index()].shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    opt.step += 1;
    let h = opt.hyper;
    let t = opt.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let decay = if params.entry(id).decay {
            lr * h.weight_decay
        } else {
            0.0
        };
        let (m, v) = (&mut opt.m[id.index()], &mut opt.v[id.index()]);
        let p = params.get_mut(id).data_mut();
        let g = grads[id.index()].data();
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            *p *= 1.0 - decay;
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak`, then cosine decay to `min` at `total`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, peak: f64, min: f64) -> Result<f64> {
    if warmup >= total || step > total {
        return Err(Error::invalid(
            "lr_schedule",
            format!("need warmup < total and step <= total, got step {step}, warmup {warmup}, total {total}"),
        ));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Linear scaling rule, `base · batch / 256`.
pub fn effective_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 256.0
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
