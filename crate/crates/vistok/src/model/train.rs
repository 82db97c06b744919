use super::backward::backward_batch;
use super::forward::{forward_examples, loss_and_grad_logits, Batch};
use super::{ModelConfig, ModelParams, Scalar};
use crate::error::{Error, Result};

/// Linear warmup to `peak_lr` over the first ceil(warmup_frac * total)
/// steps, then cosine decay to zero at `total`. `step` is 1-based.
pub fn lr_at(step: u64, total_steps: u64, peak_lr: f64, warmup_frac: f64) -> f64 {
    let warmup = (warmup_frac * total_steps as f64).ceil().max(1.0) as u64;
    if step <= warmup {
        peak_lr * step as f64 / warmup as f64
    } else if step >= total_steps {
        0.0
    } else {
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub struct TrainState<T> {
    pub params: ModelParams<T>,
    moment1: ModelParams<T>,
    moment2: ModelParams<T>,
    pub step: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParams<T>, total_steps: u64, peak_lr: f64, batch_size: usize) -> Self {
        let moment1 = params.clone().zeros_like();
        let moment2 = params.clone().zeros_like();
        TrainState {
            params,
            moment1,
            moment2,
            step: 0,
            total_steps,
            peak_lr,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.total_steps, self.peak_lr, self.warmup_frac)
    }
}

pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// One AdamW update (decoupled weight decay, applied to matrices only).
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch, cfg: &ModelConfig) -> Result<StepStats> {
    let (logits, cache) = forward_examples(batch, cfg, &state.params)?;
    let (loss, dlogits) = loss_and_grad_logits(&logits, &batch.streams, cache.batch, cache.seq)?;
    let loss_f64 = loss.to_f64_();
    if !loss_f64.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step + 1, loss: loss_f64 });
    }
    let mut grads = backward_batch(&dlogits, &cache, batch, cfg, &state.params)?;
    drop(cache);

    state.step += 1;
    let lr = state.lr(state.step);
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - state.beta1), T::from_f64(1.0 - state.beta2));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(state.eps);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let wd = T::from_f64(state.weight_decay);

    let ps = state.params.tensors_mut();
    let gs = grads.tensors_mut();
    let ms = state.moment1.tensors_mut();
    let vs = state.moment2.tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        // norms and biases are exempt from decay
        let decay = !(name.contains("norm") || name.ends_with("_b") || name.contains("_b1") || name.contains("_b2"));
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            let mhat = m[i] * inv_bc1;
            let vhat = v[i] * inv_bc2;
            let mut update = mhat / (vhat.sqrt() + eps);
            if decay {
                update += wd * p[i];
            }
            p[i] = p[i] - lr_t * update;
        }
    }
    Ok(StepStats { step: state.step, lr, loss: loss_f64 })
}
