use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Per-parameter first and second moment accumulators.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

/// AdamW with decoupled weight decay. Decay is applied to tensors of rank
/// two or more (kernels), never to biases.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            config,
            state: OptimizerState {
                first_moment: zeros.clone(),
                second_moment: zeros,
                step: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if self.state.first_moment.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        for i in 0..params.len() {
            if params.get(i).grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has no gradient",
                    params.name(i)
                )));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(t));
        let bias2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.eps);
        let lr_t = T::lit(lr);
        let decay = T::one() - T::lit(lr * c.weight_decay);
        for i in 0..params.len() {
            let tensor = params.get_mut(i);
            let apply_decay = tensor.shape().len() >= 2 && c.weight_decay > 0.0;
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                if apply_decay {
                    *w = *w * decay;
                }
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(stores: &mut [&mut ParamStore<T>], max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for store in stores.iter() {
        for t in store.tensors() {
            if let Some(g) = t.grad() {
                total += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let factor = T::lit(max_norm / (norm + 1e-12));
        for store in stores.iter_mut() {
            for t in store.tensors_mut() {
                if let Some(g) = t.grad_mut() {
                    for v in g {
                        *v *= factor;
                    }
                }
            }
        }
    }
    norm
}

/// Linear warmup to `base_lr` followed by half-cosine decay to `base_lr/100`.
///
/// Warmup epoch `e` gets `base_lr·(e+1)/(warmup+1)`, so epoch `warmup` is the
/// first to see the full rate and the final epoch sits on the floor.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64, warmup_epochs: usize) -> Result<f64> {
    if total_epochs <= warmup_epochs {
        return Err(Error::Config(format!(
            "total epochs ({total_epochs}) must exceed warmup epochs ({warmup_epochs})"
        )));
    }
    if !(base_lr > 0.0) {
        return Err(Error::Config(format!("base learning rate must be positive, got {base_lr}")));
    }
    if epoch >= total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * (epoch + 1) as f64 / (warmup_epochs + 1) as f64);
    }
    let floor = base_lr / 100.0;
    let span = total_epochs - 1 - warmup_epochs;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (epoch - warmup_epochs) as f64 / span as f64;
    Ok(floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
