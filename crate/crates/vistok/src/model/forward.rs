use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2};

use super::{ModelConfig, ModelParams, Scalar};
use crate::assemble::TokenStream;
use crate::error::{Error, Result};
use crate::render::{downscale, PageImage};
use crate::textok::PAD;

/// One training/inference example: token skeleton plus the images that fill
/// its slots, in slot order.
#[derive(Clone)]
pub struct Batch {
    pub streams: Vec<TokenStream>,
    pub images: Vec<Vec<Arc<PageImage>>>,
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub struct PatchCache<T> {
    /// normalized patch pixels, (tokens_per_image, patch^2)
    pub x: Array2<T>,
    /// pre-adaptor linear features
    pub z: Array2<T>,
    pub h_pre: Array2<T>,
    pub h_act: Array2<T>,
}

/// Non-overlapping row-major patches, linear projection, 2-layer adaptor,
/// learned slot positions. Returns the visual token matrix and the
/// activations needed for backprop.
pub fn patch_embed<T: Scalar>(
    img: &PageImage,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<(Array2<T>, PatchCache<T>)> {
    if img.side_px != cfg.image_side_px {
        return Err(Error::Shape { got: img.side_px as usize, want: cfg.image_side_px as usize });
    }
    let patch = cfg.patch_px as usize;
    let side = cfg.image_side_px as usize;
    let grid = side / patch;
    let tpi = cfg.tokens_per_image();
    let inv255 = T::from_f64(1.0 / 255.0);
    let mut x = Array2::<T>::zeros((tpi, cfg.patch_dim()));
    for gy in 0..grid {
        for gx in 0..grid {
            let t = gy * grid + gx;
            for py in 0..patch {
                for px in 0..patch {
                    let v = img.pixels[(gy * patch + py) * side + gx * patch + px];
                    x[[t, py * patch + px]] = T::from_f64(v as f64) * inv255;
                }
            }
        }
    }
    let z = x.dot(&params.patch_w) + &params.patch_b;
    let h_pre = z.dot(&params.adaptor_w1) + &params.adaptor_b1;
    let h_act = h_pre.mapv(gelu);
    let mut out = h_act.dot(&params.adaptor_w2) + &params.adaptor_b2;
    out += &params.slot_pos;
    Ok((out, PatchCache { x, z, h_pre, h_act }))
}

pub struct EmbedCache<T> {
    /// (row offset of the slot within the padded batch matrix, patch cache)
    pub slots: Vec<(usize, PatchCache<T>)>,
}

/// Token-embedding rows with image-slot rows substituted by patch_embed
/// output. `row_base` positions the example inside a padded batch matrix.
pub fn embed_sequence_into<T: Scalar>(
    stream: &TokenStream,
    images: &[Arc<PageImage>],
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    out: &mut Array2<T>,
    row_base: usize,
) -> Result<EmbedCache<T>> {
    if stream.image_slots.len() != images.len() {
        return Err(Error::SlotMismatch { slots: stream.image_slots.len(), images: images.len() });
    }
    for (pos, &id) in stream.ids.iter().enumerate() {
        out.row_mut(row_base + pos).assign(&params.tok_emb.row(id as usize));
    }
    let mut slots = Vec::with_capacity(images.len());
    for (slot, image) in stream.image_slots.iter().zip(images) {
        if slot.length != cfg.tokens_per_image() {
            return Err(Error::SlotMismatch { slots: slot.length, images: cfg.tokens_per_image() });
        }
        let scaled;
        let img = if image.side_px == cfg.image_side_px {
            image.as_ref()
        } else {
            scaled = downscale(image, cfg.image_side_px);
            &scaled
        };
        let (rows, cache) = patch_embed(img, cfg, params)?;
        out.slice_mut(s![row_base + slot.position..row_base + slot.position + slot.length, ..])
            .assign(&rows);
        slots.push((row_base + slot.position, cache));
    }
    Ok(EmbedCache { slots })
}

/// Single-sequence embedding matrix Q.
pub fn embed_sequence<T: Scalar>(
    stream: &TokenStream,
    images: &[Arc<PageImage>],
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<Array2<T>> {
    let mut out = Array2::<T>::zeros((stream.len(), cfg.d_model));
    embed_sequence_into(stream, images, cfg, params, &mut out, 0)?;
    Ok(out)
}

pub struct LayerCache<T> {
    pub x_in: Array2<T>,
    pub inv_rms1: Array1<T>,
    pub normed1: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// attention probabilities, one (S, S) matrix per (batch, head)
    pub probs: Vec<Array2<T>>,
    pub attn_concat: Array2<T>,
    pub x_mid: Array2<T>,
    pub inv_rms2: Array1<T>,
    pub normed2: Array2<T>,
    pub h_pre: Array2<T>,
    pub h_act: Array2<T>,
}

pub struct ForwardCache<T> {
    pub batch: usize,
    pub seq: usize,
    pub emb: Array2<T>,
    pub embeds: Vec<EmbedCache<T>>,
    pub layers: Vec<LayerCache<T>>,
    pub inv_rms_f: Array1<T>,
    pub normed_f: Array2<T>,
    pub rope_cos: Array2<T>,
    pub rope_sin: Array2<T>,
}

const RMS_EPS: f64 = 1e-6;

pub(crate) fn rms_norm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>) -> (Array2<T>, Array1<T>) {
    let d = T::from_f64(x.ncols() as f64);
    let eps = T::from_f64(RMS_EPS);
    let mut inv = Array1::<T>::zeros(x.nrows());
    let mut out = Array2::<T>::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / d;
        let r = (ms + eps).sqrt().recip();
        inv[i] = r;
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v * r * gain[j];
        }
    }
    (out, inv)
}

pub(crate) fn rope_tables<T: Scalar>(seq: usize, head_dim: usize) -> (Array2<T>, Array2<T>) {
    let half = head_dim / 2;
    let mut cos = Array2::<T>::zeros((seq, half));
    let mut sin = Array2::<T>::zeros((seq, half));
    for pos in 0..seq {
        for i in 0..half {
            let theta = 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * theta;
            cos[[pos, i]] = T::from_f64(angle.cos());
            sin[[pos, i]] = T::from_f64(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotate pairs (2i, 2i+1) of every head in place. `sign` -1 inverts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_rope<T: Scalar>(
    x: &mut Array2<T>,
    batch: usize,
    seq: usize,
    n_heads: usize,
    head_dim: usize,
    cos: &Array2<T>,
    sin: &Array2<T>,
    sign: T,
) {
    let half = head_dim / 2;
    for b in 0..batch {
        for pos in 0..seq {
            let row = b * seq + pos;
            for h in 0..n_heads {
                let base = h * head_dim;
                for i in 0..half {
                    let c = cos[[pos, i]];
                    let sn = sin[[pos, i]] * sign;
                    let a = x[[row, base + 2 * i]];
                    let bb = x[[row, base + 2 * i + 1]];
                    x[[row, base + 2 * i]] = a * c - bb * sn;
                    x[[row, base + 2 * i + 1]] = a * sn + bb * c;
                }
            }
        }
    }
}

/// Pre-norm causal transformer over a padded batch. `emb` is (B*S, d);
/// returns logits (B*S, vocab) and every activation backward needs.
pub fn forward_batch<T: Scalar>(
    emb: Array2<T>,
    embeds: Vec<EmbedCache<T>>,
    batch: usize,
    seq: usize,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    if seq > cfg.context_len {
        return Err(Error::ContextOverflow { got: seq, limit: cfg.context_len });
    }
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let nh = cfg.n_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let (rope_cos, rope_sin) = rope_tables::<T>(seq, hd);

    let mut x = emb.clone();
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let x_in = x.clone();
        let (normed1, inv_rms1) = rms_norm(&x, &layer.norm1);
        let mut q = normed1.dot(&layer.wq);
        let mut k = normed1.dot(&layer.wk);
        let v = normed1.dot(&layer.wv);
        apply_rope(&mut q, batch, seq, nh, hd, &rope_cos, &rope_sin, T::one());
        apply_rope(&mut k, batch, seq, nh, hd, &rope_cos, &rope_sin, T::one());

        let mut attn_concat = Array2::<T>::zeros((batch * seq, d));
        let mut probs = Vec::with_capacity(batch * nh);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..nh {
                let cols = h * hd..(h + 1) * hd;
                let qv = q.slice(s![rows.clone(), cols.clone()]);
                let kv = k.slice(s![rows.clone(), cols.clone()]);
                let vv = v.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qv.dot(&kv.t());
                scores.mapv_inplace(|val| val * scale);
                // causal softmax
                let mut p = Array2::<T>::zeros((seq, seq));
                for i in 0..seq {
                    let mut maxv = T::neg_infinity();
                    for j in 0..=i {
                        maxv = maxv.max(scores[[i, j]]);
                    }
                    let mut sum = T::zero();
                    for j in 0..=i {
                        let e = (scores[[i, j]] - maxv).exp();
                        p[[i, j]] = e;
                        sum += e;
                    }
                    let inv = sum.recip();
                    for j in 0..=i {
                        p[[i, j]] = p[[i, j]] * inv;
                    }
                }
                let out = p.dot(&vv);
                attn_concat.slice_mut(s![rows.clone(), cols.clone()]).assign(&out);
                probs.push(p);
            }
        }
        let attn_out = attn_concat.dot(&layer.wo);
        let x_mid = &x_in + &attn_out;
        let (normed2, inv_rms2) = rms_norm(&x_mid, &layer.norm2);
        let h_pre = normed2.dot(&layer.w1);
        let h_act = h_pre.mapv(gelu);
        let ffn_out = h_act.dot(&layer.w2);
        x = &x_mid + &ffn_out;
        layer_caches.push(LayerCache {
            x_in,
            inv_rms1,
            normed1,
            q,
            k,
            v,
            probs,
            attn_concat,
            x_mid,
            inv_rms2,
            normed2,
            h_pre,
            h_act,
        });
    }
    let (normed_f, inv_rms_f) = rms_norm(&x, &params.final_norm);
    let logits = normed_f.dot(&params.head);
    Ok((
        logits,
        ForwardCache {
            batch,
            seq,
            emb,
            embeds,
            layers: layer_caches,
            inv_rms_f,
            normed_f,
            rope_cos,
            rope_sin,
        },
    ))
}

/// Embed and run one batch of examples, right-padded to the longest stream.
pub fn forward_examples<T: Scalar>(
    batch: &Batch,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let b = batch.streams.len();
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    let seq = batch.streams.iter().map(TokenStream::len).max().unwrap();
    if seq > cfg.context_len {
        return Err(Error::ContextOverflow { got: seq, limit: cfg.context_len });
    }
    let mut emb = Array2::<T>::zeros((b * seq, cfg.d_model));
    // padding rows take the pad embedding
    let pad_row = params.tok_emb.row(PAD as usize).to_owned();
    let mut embeds = Vec::with_capacity(b);
    for (bi, (stream, images)) in batch.streams.iter().zip(&batch.images).enumerate() {
        for pos in stream.len()..seq {
            emb.row_mut(bi * seq + pos).assign(&pad_row);
        }
        embeds.push(embed_sequence_into(stream, images, cfg, params, &mut emb, bi * seq)?);
    }
    forward_batch(emb, embeds, b, seq, cfg, params)
}

/// Single-sequence forward: logits for an embedding matrix Q.
pub fn forward<T: Scalar>(
    q: Array2<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Array2<T>> {
    let seq = q.nrows();
    let (logits, _) = forward_batch(q, Vec::new(), 1, seq, cfg, params)?;
    Ok(logits)
}

fn softmax_row<T: Scalar>(row: ArrayView2<T>) -> Vec<T> {
    debug_assert_eq!(row.nrows(), 1);
    let maxv = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let exps: Vec<T> = row.iter().map(|&v| (v - maxv).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &v| a + v);
    exps.into_iter().map(|v| v / sum).collect()
}

/// Mean negative log-likelihood over supervised positions, with shift-by-one
/// targets: the token at a supervised position p is predicted from logits at
/// p-1.
pub fn loss<T: Scalar>(logits: &Array2<T>, stream: &TokenStream) -> Result<T> {
    let (l, _) = loss_and_grad_logits(logits, std::slice::from_ref(stream), 1, logits.nrows())?;
    Ok(l)
}

/// Batched loss plus gradient wrt logits. `logits` is (B*S, V); streams are
/// right-padded to S.
pub fn loss_and_grad_logits<T: Scalar>(
    logits: &Array2<T>,
    streams: &[TokenStream],
    batch: usize,
    seq: usize,
) -> Result<(T, Array2<T>)> {
    let mut count = 0usize;
    for stream in streams {
        count += stream
            .supervision_mask
            .iter()
            .enumerate()
            .filter(|&(p, &m)| m && p > 0)
            .count();
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_count = T::from_f64(1.0 / count as f64);
    let mut total = T::zero();
    let mut dlogits = Array2::<T>::zeros(logits.raw_dim());
    for (bi, stream) in streams.iter().enumerate().take(batch) {
        for (p, &m) in stream.supervision_mask.iter().enumerate() {
            if !m || p == 0 {
                continue;
            }
            let row = bi * seq + p - 1;
            let target = stream.ids[p] as usize;
            let probs = softmax_row(logits.slice(s![row..row + 1, ..]));
            let tiny = T::from_f64(1e-300);
            total = total - (probs[target] + tiny).ln();
            for (j, &pj) in probs.iter().enumerate() {
                let delta = if j == target { T::one() } else { T::zero() };
                dlogits[[row, j]] = (pj - delta) * inv_count;
            }
        }
    }
    Ok((total * inv_count, dlogits))
}
