use ndarray::{s, Array1, Array2};

use super::forward::{apply_rope, gelu_grad, Batch, ForwardCache};
use super::{ModelConfig, ModelParams, Scalar};
use crate::error::Result;
use crate::textok::PAD;

/// d(loss)/d(x) and d(loss)/d(gain) through y = x * inv_rms * gain.
fn rms_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    x: &Array2<T>,
    inv_rms: &Array1<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
) -> Array2<T> {
    let d = T::from_f64(x.ncols() as f64);
    let mut dx = Array2::<T>::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let r = inv_rms[i];
        let mut inner = T::zero();
        for j in 0..x.ncols() {
            let g_dy = gain[j] * dy[[i, j]];
            inner += g_dy * x[[i, j]];
            dgain[j] += dy[[i, j]] * x[[i, j]] * r;
        }
        let coef = r * r * r / d * inner;
        for j in 0..x.ncols() {
            dx[[i, j]] = r * gain[j] * dy[[i, j]] - x[[i, j]] * coef;
        }
    }
    dx
}

/// Reverse-mode pass: gradient of the loss wrt every parameter, given the
/// gradient wrt logits and the cached forward activations.
pub fn backward_batch<T: Scalar>(
    dlogits: &Array2<T>,
    cache: &ForwardCache<T>,
    batch: &Batch,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<ModelParams<T>> {
    let mut grads = params.clone().zeros_like();
    let b = cache.batch;
    let seq = cache.seq;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    // output head and final norm
    grads.head = grads.head + cache.normed_f.t().dot(dlogits);
    let dnormed_f = dlogits.dot(&params.head.t());
    let x_top = cache
        .layers
        .last()
        .map(|l| &l.x_mid + &l.h_act.dot(&params.layers.last().unwrap().w2))
        .unwrap_or_else(|| cache.emb.clone());
    let mut dx = rms_norm_backward(&dnormed_f, &x_top, &cache.inv_rms_f, &params.final_norm, &mut grads.final_norm);

    for (li, layer_cache) in cache.layers.iter().enumerate().rev() {
        let layer = &params.layers[li];
        let glayer = &mut grads.layers[li];

        // ffn branch
        glayer.w2 = &glayer.w2 + &layer_cache.h_act.t().dot(&dx);
        let dh_act = dx.dot(&layer.w2.t());
        let mut dh_pre = dh_act;
        dh_pre.zip_mut_with(&layer_cache.h_pre, |g, &pre| *g = *g * gelu_grad(pre));
        glayer.w1 = &glayer.w1 + &layer_cache.normed2.t().dot(&dh_pre);
        let dnormed2 = dh_pre.dot(&layer.w1.t());
        let dx_mid_norm =
            rms_norm_backward(&dnormed2, &layer_cache.x_mid, &layer_cache.inv_rms2, &layer.norm2, &mut glayer.norm2);
        let dx_mid = &dx + &dx_mid_norm; // residual

        // attention branch
        glayer.wo = &glayer.wo + &layer_cache.attn_concat.t().dot(&dx_mid);
        let dattn_concat = dx_mid.dot(&layer.wo.t());
        let mut dq = Array2::<T>::zeros((b * seq, d));
        let mut dk = Array2::<T>::zeros((b * seq, d));
        let mut dv = Array2::<T>::zeros((b * seq, d));
        for bi in 0..b {
            let rows = bi * seq..(bi + 1) * seq;
            for h in 0..nh {
                let cols = h * hd..(h + 1) * hd;
                let p = &layer_cache.probs[bi * nh + h];
                let dout = dattn_concat.slice(s![rows.clone(), cols.clone()]);
                let qv = layer_cache.q.slice(s![rows.clone(), cols.clone()]);
                let kv = layer_cache.k.slice(s![rows.clone(), cols.clone()]);
                let vv = layer_cache.v.slice(s![rows.clone(), cols.clone()]);

                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&p.t().dot(&dout));
                let dp = dout.dot(&vv.t());
                // softmax backward, rows independent; masked entries have p=0
                let mut ds = Array2::<T>::zeros((seq, seq));
                for i in 0..seq {
                    let mut inner = T::zero();
                    for j in 0..=i {
                        inner += dp[[i, j]] * p[[i, j]];
                    }
                    for j in 0..=i {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - inner);
                    }
                }
                ds.mapv_inplace(|v| v * scale);
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kv));
                dk.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.t().dot(&qv));
            }
        }
        // undo the rotary rotation
        apply_rope(&mut dq, b, seq, nh, hd, &cache.rope_cos, &cache.rope_sin, -T::one());
        apply_rope(&mut dk, b, seq, nh, hd, &cache.rope_cos, &cache.rope_sin, -T::one());

        glayer.wq = &glayer.wq + &layer_cache.normed1.t().dot(&dq);
        glayer.wk = &glayer.wk + &layer_cache.normed1.t().dot(&dk);
        glayer.wv = &glayer.wv + &layer_cache.normed1.t().dot(&dv);
        let dnormed1 = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        let dx_in_norm =
            rms_norm_backward(&dnormed1, &layer_cache.x_in, &layer_cache.inv_rms1, &layer.norm1, &mut glayer.norm1);
        dx = &dx_mid + &dx_in_norm;
    }

    // embedding scatter: token rows to tok_emb, slot rows through the patch
    // encoder, padding rows to the pad embedding
    for (bi, stream) in batch.streams.iter().enumerate() {
        let embed = &cache.embeds[bi];
        let mut slot_iter = embed.slots.iter().peekable();
        let mut pos = 0usize;
        while pos < stream.len() {
            if let Some(&&(slot_row, ref pcache)) = slot_iter.peek() {
                if bi * seq + pos == slot_row {
                    let tpi = cfg.tokens_per_image();
                    let dvis = dx.slice(s![slot_row..slot_row + tpi, ..]).to_owned();
                    grads.slot_pos = &grads.slot_pos + &dvis;
                    grads.adaptor_b2 = &grads.adaptor_b2 + &dvis.sum_axis(ndarray::Axis(0));
                    grads.adaptor_w2 = &grads.adaptor_w2 + &pcache.h_act.t().dot(&dvis);
                    let dh = dvis.dot(&params.adaptor_w2.t());
                    let mut dh_pre = dh;
                    dh_pre.zip_mut_with(&pcache.h_pre, |g, &pre| *g = *g * gelu_grad(pre));
                    grads.adaptor_b1 = &grads.adaptor_b1 + &dh_pre.sum_axis(ndarray::Axis(0));
                    grads.adaptor_w1 = &grads.adaptor_w1 + &pcache.z.t().dot(&dh_pre);
                    let dz = dh_pre.dot(&params.adaptor_w1.t());
                    grads.patch_b = &grads.patch_b + &dz.sum_axis(ndarray::Axis(0));
                    grads.patch_w = &grads.patch_w + &pcache.x.t().dot(&dz);
                    slot_iter.next();
                    pos += tpi;
                    continue;
                }
            }
            let id = stream.ids[pos] as usize;
            let drow = dx.row(bi * seq + pos);
            let mut erow = grads.tok_emb.row_mut(id);
            erow += &drow;
            pos += 1;
        }
        for pad_pos in stream.len()..seq {
            let drow = dx.row(bi * seq + pad_pos);
            let mut erow = grads.tok_emb.row_mut(PAD as usize);
            erow += &drow;
        }
    }
    Ok(grads)
}
