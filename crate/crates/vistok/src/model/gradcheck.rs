use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::backward::backward_batch;
use super::forward::{forward_examples, loss_and_grad_logits, Batch};
use super::{ModelConfig, ModelParams};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_coords: usize,
    /// (tensor name, flat index, analytic, numeric) of the worst coordinate
    pub worst: Option<(String, usize, f64, f64)>,
}

fn batch_loss(params: &ModelParams<f64>, cfg: &ModelConfig, batch: &Batch) -> Result<f64> {
    let (logits, cache) = forward_examples(batch, cfg, params)?;
    let (loss, _) = loss_and_grad_logits(&logits, &batch.streams, cache.batch, cache.seq)?;
    Ok(loss)
}

/// Central finite differences against the analytic gradient at f64,
/// sampling coordinates from every parameter tensor. Reported error is
/// max over coords of |g_a - g_n| / max(|g_a|, |g_n|, 1e-12).
pub fn grad_check(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    batch: &Batch,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (logits, cache) = forward_examples(batch, cfg, params)?;
    let (_, dlogits) = loss_and_grad_logits(&logits, &batch.streams, cache.batch, cache.seq)?;
    let mut analytic = backward_batch(&dlogits, &cache, batch, cfg, params)?;
    drop(cache);

    // coordinate plan: spread n_coords across tensors, at least one each
    let mut work = params.clone();
    let n_tensors = work.tensors_mut().len();
    let per_tensor = n_coords.div_ceil(n_tensors);
    let mut plan: Vec<(usize, usize)> = Vec::new(); // (tensor index, flat coord)
    for (ti, (_, slice)) in work.tensors_mut().into_iter().enumerate() {
        for _ in 0..per_tensor.min(slice.len()) {
            plan.push((ti, rng.gen_range(0..slice.len())));
        }
    }

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let names: Vec<&'static str> = analytic.tensors_mut().iter().map(|(n, _)| *n).collect();
    for (ti, ci) in plan.iter().copied() {
        let ga = analytic.tensors_mut()[ti].1[ci];
        let orig = work.tensors_mut()[ti].1[ci];
        work.tensors_mut()[ti].1[ci] = orig + epsilon;
        let plus = batch_loss(&work, cfg, batch)?;
        work.tensors_mut()[ti].1[ci] = orig - epsilon;
        let minus = batch_loss(&work, cfg, batch)?;
        work.tensors_mut()[ti].1[ci] = orig;
        let gn = (plus - minus) / (2.0 * epsilon);
        let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((names[ti].to_string(), ci, ga, gn));
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, n_coords: plan.len(), worst })
}
